"""Model presets, synthetic inputs and the layer/step driver loop.

:func:`run_model` executes attention numerically (float or 12-bit fixed
point), threads the importance state through layers and generation steps
and records a :class:`~attnsim.simarch.Trace`. :func:`synthetic_trace`
builds the same kind of trace from schedule arithmetic alone, with an
injected LSB refetch rate, for runs where only traffic and cycles matter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import AttentionInput, MAX_CONTEXT, quantize_probs, softmax_row
from .progressive import PQPolicy, PQStats, head_probs
from .pruning import (ImportanceState, PruneSchedule, accumulate_head_importance,
                      accumulate_token_importance, keep_count, local_value_prune,
                      select_heads_count, select_tokens_count)
from .quant import quantize
from .simarch import ArchConfig, HeadRecord, LayerRecord, Precision, Trace, simulate
from .topk import TopKConfig, quick_select

PEAK_GAIN = 2.0
PEAK_NOISE = 0.1
FLAT_NOISE = 0.05


@dataclass(frozen=True)
class ModelConfig:
    name: str
    num_layers: int
    heads: int
    head_dim: int = 64
    stage: str = "summarization"
    seq_len: int = 128
    prompt_len: int = 992
    gen_steps: int = 32
    seed: int = 0
    mode: str = "normal"
    flat_fraction: float = 0.0

    def __post_init__(self):
        if self.stage not in ("summarization", "generation"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.mode not in ("normal", "peaked", "mixed"):
            raise ValueError(f"unknown input mode {self.mode!r}")
        if self.num_layers < 1 or self.heads < 1 or self.head_dim < 1:
            raise ValueError("layers, heads and head_dim must be positive")
        if self.stage == "generation" and self.prompt_len + self.gen_steps > MAX_CONTEXT:
            raise ValueError(f"prompt_len + gen_steps exceeds {MAX_CONTEXT}")
        if self.stage == "summarization" and not 1 <= self.seq_len <= MAX_CONTEXT:
            raise ValueError(f"seq_len must be in [1, {MAX_CONTEXT}]")

    @property
    def d_in(self) -> int:
        return self.heads * self.head_dim


PRESETS = {
    "bert-base": ModelConfig("bert-base", 12, 12, 64, "summarization", seq_len=128),
    "bert-large": ModelConfig("bert-large", 24, 16, 64, "summarization", seq_len=128),
    "gpt2-small": ModelConfig("gpt2-small", 12, 12, 64, "generation", prompt_len=992, gen_steps=32),
    "gpt2-medium": ModelConfig("gpt2-medium", 24, 16, 64, "generation", prompt_len=992, gen_steps=32),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


def flat_pattern(count: int, fraction: float, offset: int = 0) -> np.ndarray:
    """Evenly spread boolean pattern with ``round(count * fraction)``-ish ones."""
    i = np.arange(offset, offset + count)
    return np.floor((i + 1) * fraction) > np.floor(i * fraction)


def _rng(cfg: ModelConfig, *tag) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *tag])


def _queries(cfg: ModelConfig, k: np.ndarray, rows: int, context, layer: int) -> np.ndarray:
    """Query rows for one layer; ``context[i]`` bounds the keys row i may target."""
    rng = _rng(cfg, layer, 1)
    if cfg.mode == "normal":
        return rng.standard_normal((rows, cfg.d_in))
    h, d = cfg.heads, cfg.head_dim
    q = np.empty((rows, cfg.d_in))
    flat = (flat_pattern(rows * h, cfg.flat_fraction, layer * rows * h).reshape(rows, h)
            if cfg.mode == "mixed" else np.zeros((rows, h), dtype=bool))
    for r in range(rows):
        targets = rng.integers(0, context[r], size=h)
        noise = rng.standard_normal(cfg.d_in)
        for hd in range(h):
            sl = slice(hd * d, (hd + 1) * d)
            if flat[r, hd]:
                q[r, sl] = FLAT_NOISE * noise[sl]
            else:
                q[r, sl] = PEAK_GAIN * k[targets[hd], sl] + PEAK_NOISE * noise[sl]
    return q


def synth_layer(cfg: ModelConfig, layer: int):
    """Seeded (Q, K, V) for one layer.

    Summarization: Q is ``seq_len`` rows and K/V ``seq_len`` tokens.
    Generation: K/V cover the prompt plus every generated token and Q holds
    one row per generation step (row t may target keys ``0 .. prompt + t``).
    """
    rng = _rng(cfg, layer, 0)
    if cfg.stage == "summarization":
        n, rows = cfg.seq_len, cfg.seq_len
        context = np.full(rows, n)
    else:
        n, rows = cfg.prompt_len + cfg.gen_steps, cfg.gen_steps
        context = cfg.prompt_len + np.arange(rows) + 1
    k = rng.standard_normal((n, cfg.d_in))
    v = rng.standard_normal((n, cfg.d_in))
    return _queries(cfg, k, rows, context, layer), k, v


def synth_inputs(cfg: ModelConfig):
    """Yield one :class:`AttentionInput` per layer (generation: all step queries at once)."""
    for layer in range(cfg.num_layers):
        q, k, v = synth_layer(cfg, layer)
        yield AttentionInput(q, k, v, cfg.heads)


@dataclass
class RunResult:
    outputs: list
    state: ImportanceState
    trace: Trace
    pq_stats: PQStats
    kept_tokens: list = field(default_factory=list)
    kept_heads: list = field(default_factory=list)
    score_increments: list = field(default_factory=list)
    report: object = None


class _LayerData:
    """Quantized (or float) tensors of one layer, split by head on demand."""

    def __init__(self, cfg, layer, numeric, precision):
        q, k, v = synth_layer(cfg, layer)
        self.numeric = numeric
        if numeric == "float":
            self.q, self.k, self.v = q, k, v
            self.scales = (1.0, 1.0, 1.0)
        else:
            bits = precision.total_bits
            tq, tk, tv = (quantize(x, bits, precision.msb_bits) for x in (q, k, v))
            self.q, self.k, self.v = (t.codes.astype(np.int32) for t in (tq, tk, tv))
            self.scales = (tq.params.scale, tk.params.scale, tv.params.scale)
        self.d = cfg.head_dim

    def chunk(self, which, rows, head):
        arr = getattr(self, which)
        return arr[rows, head * self.d:(head + 1) * self.d].astype(
            np.float64 if self.numeric == "float" else np.int64)


def _head_attention(data, q_rows, tok, head, policy, lsb_bits, v_keep, cfg_topk):
    """Probabilities, outputs and bookkeeping for one head over kept tokens."""
    d = data.d
    q = data.chunk("q", q_rows, head)
    k = data.chunk("k", tok, head)
    v = data.chunk("v", tok, head)
    nq = q.shape[0]
    if data.numeric == "float":
        s = q @ k.T / math.sqrt(d)
        probs = np.stack([softmax_row(r) for r in s])
        refetch = np.zeros(nq, dtype=bool)
    else:
        sq, sk, _ = data.scales
        scale = sq * sk / math.sqrt(d)
        if policy is not None and policy.enabled:
            q_m = (q >> lsb_bits) << lsb_bits
            k_m = (k >> lsb_bits) << lsb_bits
            probs, refetch = head_probs(q_m, k_m, q, k, scale, policy)
        else:
            probs = np.stack([softmax_row(r, scale=scale) for r in q @ k.T])
            refetch = np.zeros(nq, dtype=bool)
    n = tok.size
    v_kept = np.full(nq, n)
    v_passes = [None] * nq
    v_ids = [tok] * nq
    vmask = np.ones((nq, n), dtype=bool)
    if v_keep < 1:
        for r in range(nq):
            kept, res = local_value_prune(probs[r], v_keep, cfg_topk, return_result=True)
            v_kept[r] = kept.size
            v_ids[r] = tok[kept]
            if res is not None:
                v_passes[r] = res.passes
                vmask[r] = False
                vmask[r, kept] = True
    if data.numeric == "float":
        out = (probs * vmask) @ v
    else:
        pc = quantize_probs(probs) * vmask
        if policy is not None and policy.enabled:
            v_m = (v >> lsb_bits) << lsb_bits
            acc = np.where(refetch[:, None], pc @ v, pc @ v_m)
        else:
            acc = pc @ v
        out = acc * (data.scales[2] / ((1 << 12) - 1))
    return probs, out, HeadRecord(head, tok, v_kept, refetch, v_passes, v_ids)


def run_model(cfg: ModelConfig, schedule: PruneSchedule | None = None, pq: PQPolicy | None = None,
              topk_cfg: TopKConfig = TopKConfig(), arch: ArchConfig | None = None,
              v_keep: float = 1.0, numeric: str = "fixed", granularity: str = "layer",
              static_bits: int = 12) -> RunResult:
    """Run every layer (and generation step), pruning and quantizing as configured.

    ``numeric="float"`` skips quantization entirely; ``"fixed"`` quantizes
    Q/K/V per layer at ``pq`` bits when progressive quantization is on and at
    ``static_bits`` otherwise. With ``arch`` the trace is also simulated.
    """
    if numeric not in ("float", "fixed"):
        raise ValueError(f"numeric must be 'float' or 'fixed', got {numeric!r}")
    if granularity not in ("layer", "head"):
        raise ValueError(f"granularity must be 'layer' or 'head', got {granularity!r}")
    schedule = schedule or PruneSchedule.keep_all(cfg.num_layers)
    if schedule.num_layers != cfg.num_layers:
        raise ValueError("schedule length does not match the number of layers")
    progressive = pq is not None and pq.enabled
    if progressive:
        precision = Precision(pq.msb_bits, pq.lsb_bits, True)
    else:
        msb = static_bits if static_bits in (4, 6, 8, 10, 12) else static_bits - 4
        precision = Precision(msb, static_bits - msb, False)
    lsb_bits = precision.lsb_bits
    h, d = cfg.heads, cfg.head_dim
    trace = Trace(cfg.stage, d, h, precision, meta={"model": cfg.name, "numeric": numeric})
    stats = PQStats()
    outputs, kept_tok_log, kept_head_log, inc_log = [], [], [], []

    if cfg.stage == "summarization":
        total = cfg.seq_len
        state = ImportanceState.new(total, h)
        steps = [None]
        data_cache = None
    else:
        total = cfg.prompt_len
        state = ImportanceState.new(total, h)
        steps = list(range(cfg.gen_steps))
        data_cache = [_LayerData(cfg, layer, numeric, precision) for layer in range(cfg.num_layers)]

    for step in steps:
        if step is not None:
            state.extend_tokens(1)
            state.reset_masks()
            total = cfg.prompt_len + step + 1
        prev_target = total
        for layer in range(cfg.num_layers):
            data = data_cache[layer] if data_cache else _LayerData(cfg, layer, numeric, precision)
            n_sel = len(state.selections)
            tok_target = schedule.token_target(layer, total)
            head_target = schedule.head_target(layer, h)
            if head_target < state.kept_heads.size:
                select_heads_count(state, head_target, topk_cfg)
            if granularity == "layer" and tok_target < state.kept_tokens.size:
                select_tokens_count(state, tok_target, topk_cfg)
            heads_now = state.kept_heads.copy()
            out = np.zeros((1 if step is not None else total, cfg.d_in))
            head_records = []
            layer_probs = []
            before = state.token_scores.sum()
            for j, head in enumerate(heads_now):
                if granularity == "head":
                    frac = (j + 1) / heads_now.size
                    target = math.ceil(prev_target + (tok_target - prev_target) * frac - 1e-9)
                    if target < state.kept_tokens.size:
                        select_tokens_count(state, target, topk_cfg)
                tok = state.kept_tokens.copy()
                q_rows = np.array([step]) if step is not None else tok
                probs, o, rec = _head_attention(data, q_rows, tok, head, pq if progressive else None,
                                                lsb_bits, v_keep, topk_cfg)
                out_rows = slice(None) if step is not None else tok
                out[out_rows, head * d:(head + 1) * d] = o
                head_records.append(rec)
                if progressive:
                    stats.rows_total += rec.refetch.size
                    stats.rows_refetched += int(rec.refetch.sum())
                if granularity == "head":
                    accumulate_token_importance(state, probs[None], head_ids=[head])
                else:
                    layer_probs.append(probs)
            if granularity == "layer" and layer_probs:
                accumulate_token_importance(state, np.stack(layer_probs))
            accumulate_head_importance(state, out)
            inc_log.append(state.token_scores.sum() - before)
            prev_target = tok_target
            nq = 1 if step is not None else head_records[0].token_ids.size
            trace.layers.append(LayerRecord(
                step if step is not None else 0, layer, total, nq, h, head_records,
                [s for s in state.selections[n_sel:]]))
            outputs.append(out)
            kept_tok_log.append(state.kept_tokens.copy())
            kept_head_log.append(heads_now)
    result = RunResult(outputs, state, trace, stats, kept_tok_log, kept_head_log, inc_log)
    if arch is not None:
        result.report = simulate(trace, arch, topk_cfg)
        result.pq_stats.lsb_bytes_fetched = result.report.pq_stats["lsb_bytes_fetched"]
    return result


def synthetic_trace(cfg: ModelConfig, schedule: PruneSchedule | None = None,
                    precision: Precision = Precision.static(12), refetch_rate: float = 0.0,
                    v_keep: float = 1.0, topk_cfg: TopKConfig = TopKConfig()) -> Trace:
    """Trace from schedule arithmetic: counts exact, kept identities random.

    Refetching rows follow an evenly spread pattern at ``refetch_rate`` over
    the (step, head, query) rows of each layer. Top-k jobs run the real
    quick-select on random scores so their pass structure is realistic.
    """
    schedule = schedule or PruneSchedule.keep_all(cfg.num_layers)
    rng = np.random.default_rng([cfg.seed, topk_cfg.rng_seed, 7])
    h = cfg.heads
    trace = Trace(cfg.stage, cfg.head_dim, h, precision,
                  meta={"model": cfg.name, "numeric": "none", "refetch_rate": refetch_rate})
    row_counter = np.zeros(cfg.num_layers, dtype=np.int64)
    overflow = False
    if cfg.stage == "summarization":
        step_totals = [(0, cfg.seq_len)]
    else:
        step_totals = [(t, cfg.prompt_len + t + 1) for t in range(cfg.gen_steps)]
    for step, total in step_totals:
        tokens = np.arange(total)
        heads = np.arange(h)
        for layer in range(cfg.num_layers):
            selections = []
            ht = schedule.head_target(layer, h)
            if ht < heads.size:
                sel = quick_select(rng.random(heads.size), ht, topk_cfg, rng)
                selections.append(("head", int(heads.size), ht, sel.passes))
                heads = np.sort(rng.choice(heads, ht, replace=False))
            tt = schedule.token_target(layer, total)
            if tt < tokens.size:
                sel = quick_select(rng.random(tokens.size), tt, topk_cfg, rng)
                overflow |= sel.fifo_overflow
                selections.append(("token", int(tokens.size), tt, sel.passes))
                tokens = np.sort(rng.choice(tokens, tt, replace=False))
            n = tokens.size
            nq = 1 if cfg.stage == "generation" else n
            records = []
            vk = keep_count(v_keep, n)
            for head in heads:
                rf = flat_pattern(nq, refetch_rate, int(row_counter[layer])) if refetch_rate > 0 \
                    else np.zeros(nq, dtype=bool)
                row_counter[layer] += nq
                passes, v_ids = [], []
                for _ in range(nq):
                    if vk < n:
                        sel = quick_select(rng.random(n), vk, topk_cfg, rng)
                        passes.append(sel.passes)
                        if cfg.stage == "generation":
                            v_ids.append(np.sort(rng.choice(tokens, vk, replace=False)))
                    else:
                        passes.append(None)
                        v_ids.append(tokens)
                records.append(HeadRecord(int(head), tokens, np.full(nq, vk), rf, passes,
                                          v_ids if cfg.stage == "generation" else None))
            trace.layers.append(LayerRecord(step, layer, total, nq, h, records, selections))
    trace.meta["fifo_overflow"] = bool(overflow)
    return trace


# ---------------------------------------------------------------------------
# external probability traces


def write_trace(path, probs) -> None:
    """``probs``: array (layers, h, L0, L1). Header line then float32 LE blob."""
    probs = np.asarray(probs, dtype="<f4")
    layers, h, l0, l1 = probs.shape
    with open(path, "wb") as fh:
        fh.write(f"{l0},{l1},{h},{layers}\n".encode())
        fh.write(probs.tobytes(order="C"))


def read_trace(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode().strip()
        try:
            l0, l1, h, layers = (int(x) for x in header.split(","))
        except ValueError:
            raise ValueError(f"bad trace header {header!r}; expected 'L0,L1,h,layers'") from None
        blob = fh.read()
    expected = layers * h * l0 * l1 * 4
    if len(blob) != expected:
        raise ValueError(f"trace body has {len(blob)} bytes, header implies {expected}")
    return np.frombuffer(blob, dtype="<f4").reshape(layers, h, l0, l1).astype(np.float64)


def importance_from_trace(probs, schedule: PruneSchedule, topk_cfg: TopKConfig = TopKConfig()):
    """Token pruning driven by externally computed probabilities (layers, h, L0, L1).

    Returns the final state and the kept token set used by every layer.
    """
    probs = np.asarray(probs)
    layers, h, l0, l1 = probs.shape
    state = ImportanceState.new(l1, h)
    kept = []
    for layer in range(layers):
        target = schedule.token_target(layer, l1)
        if target < state.kept_tokens.size:
            select_tokens_count(state, target, topk_cfg)
        kept.append(state.kept_tokens.copy())
        p = probs[layer][:, :, state.kept_tokens]
        accumulate_token_importance(state, p)
    return state, kept
