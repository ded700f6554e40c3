"""Causal language models: a spiking student and a dense teacher.

The student stacks residual blocks over binary spike streams. Token plus
position embeddings drive an encoder neuron population for t_steps; each
step's spikes flow through every block (spiking attention, then a spiking
two-layer FFN), the per-step pre-head representations are averaged over
time, and one real-valued projection produces logits. Residual connections
add spike trains, so deeper blocks see small integer spike sums; every
tensor produced inside a block is strictly binary.

The teacher is an ordinary pre-norm transformer (dense attention, ReLU
FFN, LayerNorm) over the same weight layout, run once per sequence with no
time dimension. Both models read parameters from a flat name -> tensor
dict so the training loop can swap plain arrays for taped Vars.

Checkpoints are a small self-describing binary format, documented at
write_checkpoint, with every multi-byte value little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from . import autodiff as ad
from . import energy as energy_mod
from .attention import (AttnWeights, SfsaState, causal_mask, csa_forward,
                        fresh_sfsa_state, sfsa_forward)
from .errors import ConfigError, ShapeError, ValidationError
from .neurons import LifParams, NeuronSpec, NeuronState, TernaryParams, fresh_state
from .numerics import Rng

LN_EPS = 1e-5


@dataclass
class ModelConfig:
    vocab_size: int = 257      # byte vocabulary plus BOS
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    t_steps: int = 2           # simulation steps per token position
    neuron_mode: str = "binary"
    beta: float = 0.5
    u_thr: float = 1.0
    attn_thr: float = 1.0      # threshold of the attention-score neurons
    surrogate_alpha: float = 2.0
    ternary_amp: float = 1.0
    ternary_reset: float = 0.0

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "max_seq_len", "t_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.attn_thr <= 0.0:
            raise ConfigError(f"attn_thr must be positive, got {self.attn_thr}")
        self.neuron_spec().validate()

    def neuron_spec(self, relaxed: bool = False) -> NeuronSpec:
        return NeuronSpec(
            mode=self.neuron_mode,
            lif=LifParams(self.beta, self.u_thr, self.surrogate_alpha),
            ternary=TernaryParams(self.ternary_amp, self.ternary_reset,
                                  self.surrogate_alpha),
            relaxed=relaxed)

    def attn_spec(self, relaxed: bool = False) -> NeuronSpec:
        return self.neuron_spec(relaxed).with_threshold(self.attn_thr)


# -- parameters ---------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int, kind: str = "student") -> dict:
    """Fresh parameter dict; kind 'teacher' adds LayerNorm tensors.

    Weights and embeddings draw N(0, 0.02) from one splitmix64 stream in a
    fixed order; biases start at zero, norm gains at one.
    """
    cfg.validate()
    if kind not in ("student", "teacher"):
        raise ConfigError(f"unknown model kind {kind!r}")
    rng = Rng(seed)
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    p: dict[str, np.ndarray] = {}
    p["tok_emb"] = rng.normal((v, d), std=0.02)
    p["pos_emb"] = rng.normal((cfg.max_seq_len, d), std=0.02)
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        for name in ("w_q", "w_k", "w_v", "w_out"):
            p[pre + "attn." + name] = rng.normal((d, d), std=0.02)
            p[pre + "attn." + name.replace("w", "b")] = np.zeros(d)
        p[pre + "ffn.w1"] = rng.normal((d, f), std=0.02)
        p[pre + "ffn.b1"] = np.zeros(f)
        p[pre + "ffn.w2"] = rng.normal((f, d), std=0.02)
        p[pre + "ffn.b2"] = np.zeros(d)
        if kind == "teacher":
            p[pre + "ln1.g"] = np.ones(d)
            p[pre + "ln1.b"] = np.zeros(d)
            p[pre + "ln2.g"] = np.ones(d)
            p[pre + "ln2.b"] = np.zeros(d)
    if kind == "teacher":
        p["final_ln.g"] = np.ones(d)
        p["final_ln.b"] = np.zeros(d)
    p["head.w"] = rng.normal((d, v), std=0.02)
    return p


def expected_param_count(cfg: ModelConfig, kind: str = "student") -> int:
    """Closed-form size of init_params output, for cross-checking."""
    d, f, v, s, n = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_seq_len, cfg.n_layers
    per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d)
    total = v * d + s * d + n * per_layer + d * v
    if kind == "teacher":
        total += n * 4 * d + 2 * d
    return total


def count_params(params: dict) -> int:
    return sum(int(np.prod(ad.value(t).shape)) for t in params.values())


def _attn_weights(params: dict, layer: int) -> AttnWeights:
    pre = f"layers.{layer}.attn."
    return AttnWeights(params[pre + "w_q"], params[pre + "b_q"],
                       params[pre + "w_k"], params[pre + "b_k"],
                       params[pre + "w_v"], params[pre + "b_v"],
                       params[pre + "w_out"], params[pre + "b_out"])


# -- spiking feed-forward ------------------------------------------------------


@dataclass
class SffnState:
    fc1: NeuronState
    fc2: NeuronState


def fresh_sffn_state() -> SffnState:
    return SffnState(fresh_state(), fresh_state())


def sffn_forward(x, w1, b1, w2, b2, state: SffnState, sn: NeuronSpec):
    """One time step of the spiking FFN: two linear maps, a neuron after each."""
    d_in = ad.value(x).shape[-1]
    if ad.value(w1).shape[0] != d_in or ad.value(w2).shape[1] != d_in:
        raise ShapeError(
            f"ffn weights {ad.value(w1).shape}/{ad.value(w2).shape} do not match input width {d_in}")
    h, st1 = sn.step(state.fc1, ad.matmul(x, w1) + b1)
    out, st2 = sn.step(state.fc2, ad.matmul(h, w2) + b2)
    return out, SffnState(st1, st2)


# -- traces --------------------------------------------------------------------


@dataclass
class TraceBundle:
    """Per-step activity recorded by snn_forward for distillation/profiling.

    attn_spikes[l][t] is the attention spike map of layer l at step t;
    hidden[l][t] is that layer's FFN output spikes. The *_active/_total
    pairs count nonzero entries against all entries of each sublayer's
    input, accumulated over time steps, for firing-rate estimates.
    """

    seq_len: int
    t_steps: int
    embed_steps: list = field(default_factory=list)
    attn_spikes: list = field(default_factory=list)
    hidden: list = field(default_factory=list)
    sfsa_in_active: np.ndarray | None = None
    sfsa_in_total: np.ndarray | None = None
    sffn_in_active: np.ndarray | None = None
    sffn_in_total: np.ndarray | None = None
    flop_counts: dict | None = None

    def attn_time_mean(self, layer: int):
        steps = self.attn_spikes[layer]
        total = steps[0]
        for s in steps[1:]:
            total = total + s
        return total / len(steps)

    def hidden_time_mean(self, layer: int):
        steps = self.hidden[layer]
        total = steps[0]
        for s in steps[1:]:
            total = total + s
        return total / len(steps)

    def embed_time_mean(self):
        total = self.embed_steps[0]
        for s in self.embed_steps[1:]:
            total = total + s
        return total / len(self.embed_steps)

    def mean_firing_rate(self) -> float:
        active = self.sfsa_in_active.sum() + self.sffn_in_active.sum()
        total = self.sfsa_in_total.sum() + self.sffn_in_total.sum()
        return float(active / total) if total else 0.0


def _count_active(x) -> tuple[int, int]:
    d = ad.value(x)
    return int(np.count_nonzero(d)), int(d.size)


# -- student forward -----------------------------------------------------------


def _check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ShapeError(f"tokens must be rank 1 or 2, got shape {ids.shape}")
    if ids.shape[1] < 1:
        raise ShapeError("empty token sequence")
    if ids.shape[1] > cfg.max_seq_len:
        raise ShapeError(
            f"sequence length {ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValidationError("token ids must be integers")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValidationError(
            f"token ids must lie in [0, {cfg.vocab_size}), got range "
            f"[{ids.min()}, {ids.max()}]")
    return ids.astype(np.int64)


def snn_forward(tokens, cfg: ModelConfig, params: dict, relaxed: bool = False,
                collect: bool = True):
    """Run the spiking model over a token batch.

    tokens: int array [L] or [B, L]. Returns (logits, TraceBundle) with
    logits [B, L, vocab] ([L, vocab] when the input was rank 1). Set
    collect=False to skip storing per-step spike tensors (counters are
    still filled); relaxed=True replaces every threshold with its smooth
    surrogate, making the forward differentiable end to end.
    """
    ids = _check_tokens(tokens, cfg)
    squeeze = np.asarray(tokens).ndim == 1
    b, l = ids.shape
    n = cfg.n_layers

    emb = ad.take_rows(params["tok_emb"], ids) + params["pos_emb"][:l]
    mask = causal_mask(l)
    sn = cfg.neuron_spec(relaxed)
    attn_sn = cfg.attn_spec(relaxed)

    trace = TraceBundle(seq_len=l, t_steps=cfg.t_steps,
                        attn_spikes=[[] for _ in range(n)],
                        hidden=[[] for _ in range(n)])
    trace.sfsa_in_active = np.zeros(n)
    trace.sfsa_in_total = np.zeros(n)
    trace.sffn_in_active = np.zeros(n)
    trace.sffn_in_total = np.zeros(n)
    trace.flop_counts = energy_mod.count_flops(cfg, l)

    enc_state = fresh_state()
    attn_states: list[SfsaState] = [fresh_sfsa_state() for _ in range(n)]
    ffn_states: list[SffnState] = [fresh_sffn_state() for _ in range(n)]
    head_steps = []

    for _ in range(cfg.t_steps):
        x, enc_state = sn.step(enc_state, emb)
        if collect:
            trace.embed_steps.append(x)
        stream = x
        for i in range(n):
            a, t = _count_active(stream)
            trace.sfsa_in_active[i] += a
            trace.sfsa_in_total[i] += t
            attn_out, attn_spk, attn_states[i] = sfsa_forward(
                stream, _attn_weights(params, i), mask, attn_states[i],
                sn, attn_sn, cfg.n_heads)
            y = stream + attn_out
            a, t = _count_active(y)
            trace.sffn_in_active[i] += a
            trace.sffn_in_total[i] += t
            pre = f"layers.{i}.ffn."
            ffn_out, ffn_states[i] = sffn_forward(
                y, params[pre + "w1"], params[pre + "b1"],
                params[pre + "w2"], params[pre + "b2"], ffn_states[i], sn)
            if collect:
                trace.attn_spikes[i].append(attn_spk)
                trace.hidden[i].append(ffn_out)
            stream = y + ffn_out
        head_steps.append(stream)

    logits = decode_logits(head_steps, params["head.w"])
    if squeeze:
        logits = logits.reshape(l, cfg.vocab_size)
    return logits, trace


def decode_logits(per_step_head_inputs, w_head):
    """Average representations over time, then project to the vocabulary."""
    if not per_step_head_inputs:
        raise ShapeError("decode_logits needs at least one time step")
    total = per_step_head_inputs[0]
    for s in per_step_head_inputs[1:]:
        total = total + s
    return ad.matmul(total / len(per_step_head_inputs), w_head)


# -- dense teacher -------------------------------------------------------------


def layer_norm(x, g, b, eps: float = LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * ((var + eps) ** -0.5) * g + b


@dataclass
class TeacherTrace:
    """Dense-model activity consumed by the alignment losses."""

    logits: object
    embed: object        # [B, L, d] after position add
    attn_maps: list      # per layer, [B, h, L, L] post-softmax
    hidden: list         # per layer, [B, L, d] block outputs


def ann_forward(tokens, cfg: ModelConfig, params: dict):
    """Run the dense teacher once (no time dimension).

    Pre-norm blocks: x += attn(LN(x)); x += ffn(LN(x)); final LayerNorm
    before the head. Returns (logits, TeacherTrace).
    """
    ids = _check_tokens(tokens, cfg)
    squeeze = np.asarray(tokens).ndim == 1
    b, l = ids.shape
    mask = causal_mask(l)

    x = ad.take_rows(params["tok_emb"], ids) + params["pos_emb"][:l]
    trace = TeacherTrace(logits=None, embed=x, attn_maps=[], hidden=[])

    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        h = layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        attn_out, attn_map = csa_forward(h, _attn_weights(params, i), mask, cfg.n_heads)
        x = x + attn_out
        h2 = layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        mid = ad.relu(ad.matmul(h2, params[pre + "ffn.w1"]) + params[pre + "ffn.b1"])
        x = x + (ad.matmul(mid, params[pre + "ffn.w2"]) + params[pre + "ffn.b2"])
        trace.attn_maps.append(attn_map)
        trace.hidden.append(x)

    x = layer_norm(x, params["final_ln.g"], params["final_ln.b"])
    logits = ad.matmul(x, params["head.w"])
    trace.logits = logits
    if squeeze:
        logits = logits.reshape(l, cfg.vocab_size)
    return logits, trace


# -- generation ----------------------------------------------------------------


@dataclass
class GenerateResult:
    tokens: list
    truncated_steps: int  # decode steps whose context no longer fit


def generate(prompt, n_new: int, cfg: ModelConfig, params: dict,
             temperature: float = 0.0, rng: Rng | None = None) -> GenerateResult:
    """Autoregressive decoding with a sliding context window.

    temperature 0 picks the argmax (lowest id on ties); positive values
    sample from softmax(logits / temperature) using the supplied rng.
    """
    ids = [int(t) for t in prompt]
    if not ids:
        raise ValidationError("prompt must not be empty")
    if any(t < 0 or t >= cfg.vocab_size for t in ids):
        raise ValidationError("prompt contains out-of-range token ids")
    if n_new < 0:
        raise ConfigError(f"n_new must be >= 0, got {n_new}")
    if temperature < 0.0:
        raise ConfigError(f"temperature must be >= 0, got {temperature}")
    if temperature > 0.0 and rng is None:
        raise ConfigError("sampling with temperature > 0 requires an rng")

    truncated = 0
    for _ in range(n_new):
        window = ids[-cfg.max_seq_len:]
        if len(ids) > cfg.max_seq_len:
            truncated += 1
        logits, _ = snn_forward(np.asarray(window, dtype=np.int64), cfg, params,
                                collect=False)
        last = ad.value(logits)[-1]
        if temperature == 0.0:
            nxt = int(np.argmax(last))  # first hit, so ties go to the lowest id
        else:
            p = ad.softmax(last / temperature)
            nxt = int(np.searchsorted(np.cumsum(p), rng.uniform()))
            nxt = min(nxt, cfg.vocab_size - 1)
        ids.append(nxt)
    return GenerateResult(tokens=ids, truncated_steps=truncated)


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"SCLM"
CKPT_VERSION = 1


def write_checkpoint(path, fields: dict, tensors: dict) -> None:
    """Serialize string fields plus named float64 tensors.

    Layout (all integers little-endian, strings utf-8):

        magic   4 bytes  b"SCLM"
        version u32
        nfields u32, then per field:  u16 key_len, key, u32 val_len, value
        ntensors u32, then per tensor (sorted by name):
            u16 name_len, name, u8 rank, u32 dim per axis, raw <f8 data
    """
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(fields)))
        for k in fields:
            kb = str(k).encode("utf-8")
            vb = str(fields[k]).encode("utf-8")
            fh.write(struct.pack("<H", len(kb)) + kb)
            fh.write(struct.pack("<I", len(vb)) + vb)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def read_checkpoint(path):
    """Inverse of write_checkpoint; returns (fields, tensors)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise ValidationError(f"checkpoint truncated at byte {off}")
        out = blob[off:off + n]
        off += n
        return out

    if take(4) != CKPT_MAGIC:
        raise ValidationError(f"{path} is not a model checkpoint")
    (ver,) = struct.unpack("<I", take(4))
    if ver != CKPT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {ver}")
    fields = {}
    (nf,) = struct.unpack("<I", take(4))
    for _ in range(nf):
        (klen,) = struct.unpack("<H", take(2))
        key = take(klen).decode("utf-8")
        (vlen,) = struct.unpack("<I", take(4))
        fields[key] = take(vlen).decode("utf-8")
    tensors = {}
    (nt,) = struct.unpack("<I", take(4))
    for _ in range(nt):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(shape)
    if off != len(blob):
        raise ValidationError(f"checkpoint has {len(blob) - off} trailing bytes")
    return fields, tensors


def config_to_fields(cfg: ModelConfig) -> dict:
    return {f.name: str(getattr(cfg, f.name)) for f in dc_fields(ModelConfig)}


def config_from_fields(fields: dict) -> ModelConfig:
    kwargs = {}
    for f in dc_fields(ModelConfig):
        if f.name in fields:
            kwargs[f.name] = _parse_field(f, fields[f.name])
    cfg = ModelConfig(**kwargs)
    cfg.validate()
    return cfg


def _parse_field(f, raw: str):
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    return raw


def save_model(path, cfg: ModelConfig, params: dict, extra_fields: dict | None = None,
               opt_tensors: dict | None = None) -> None:
    fields = config_to_fields(cfg)
    fields["kind"] = "model"
    if extra_fields:
        fields.update({str(k): str(v) for k, v in extra_fields.items()})
    tensors = {k: ad.value(v) for k, v in params.items()}
    if opt_tensors:
        tensors.update({"opt." + k: ad.value(v) for k, v in opt_tensors.items()})
    write_checkpoint(path, fields, tensors)


def load_model(path):
    """Returns (cfg, params, extra_fields, opt_tensors)."""
    fields, tensors = read_checkpoint(path)
    cfg = config_from_fields(fields)
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    opt = {k[len("opt."):]: v for k, v in tensors.items() if k.startswith("opt.")}
    known = {f.name for f in dc_fields(ModelConfig)}
    extra = {k: v for k, v in fields.items() if k not in known}
    return cfg, params, extra, opt
