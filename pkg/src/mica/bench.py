"""Cost accounting and scaling benchmarks.

FLOP convention (exact integers, applied uniformly to every mechanism):
a matmul (m,k)@(k,n) is 2*m*k*n; every elementwise op (add, mul, div,
exp, activation) is 1 per output element; a reduction over k elements is
k; a softmax row of width n is 5n (max, shift, exp, sum, divide);
a layer-norm row of width n is 5n + 4.  Only ratios and growth rates
matter, so activations are deliberately flat-rate.

Mechanisms:
  ``baseline``  channel-separate local softmax attention only
  ``mica``      baseline plus the channel-compressed global path and gate
  ``concat``    one softmax attention over all C*P tokens (the quadratic
                reference the compressed path replaces)
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from .backbone import ForecastModel, ModelConfig, patch_count, patchify, \
    sincos_table, standardize
from .tensor import no_grad

MECHANISMS = ("baseline", "mica", "concat")


@dataclass
class FlopReport:
    """Single-forward FLOPs for one mechanism at one problem size."""
    mechanism: str
    n_channels: int
    local_flops: int
    global_flops: int
    gate_flops: int
    backbone_flops: int

    @property
    def total_flops(self) -> int:
        return (self.local_flops + self.global_flops + self.gate_flops +
                self.backbone_flops)


def _ln_flops(width: int) -> int:
    return 5 * width + 4


def _linear_flops(rows: int, n_in: int, n_out: int) -> int:
    return rows * (2 * n_in * n_out + n_out)


def _softmax_flops(rows: int, width: int) -> int:
    return rows * 5 * width


def count_flops(cfg: ModelConfig, n_channels: int,
                mechanism: str) -> FlopReport:
    """Exact analytic FLOPs of one forward pass on a single window."""
    if mechanism not in MECHANISMS:
        raise ValueError(f"unknown mechanism '{mechanism}'")
    if mechanism == "mica" and cfg.mica is None:
        raise ValueError("mechanism 'mica' needs cfg.mica settings")
    c = n_channels
    p = patch_count(cfg.input_size, cfg.patch_len, cfg.stride)
    d, ff, n, lyr = cfg.d_model, cfg.ff_hidden, cfg.n_heads, cfg.n_layers
    dk, dv = cfg.d_k, cfg.d_v
    tokens = c * p

    backbone = 0
    # standardize: mean L + center L + std (square L + sum L + sqrt 1) + div L
    backbone += c * (5 * cfg.input_size + 1)
    backbone += _linear_flops(tokens, cfg.patch_len, d)          # embed
    backbone += tokens * d                                       # + posenc
    per_layer_backbone = (
        3 * _linear_flops(tokens, d, n * dk)                     # q,k,v
        + _linear_flops(tokens, n * dv, d)                       # out proj
        + 2 * tokens * d                                         # residuals
        + 2 * tokens * _ln_flops(d)
        + _linear_flops(tokens, d, ff) + tokens * ff             # ffn up+gelu
        + _linear_flops(tokens, ff, d))
    backbone += lyr * per_layer_backbone
    backbone += _linear_flops(c, p * d, cfg.horizon)             # head
    backbone += 2 * c * cfg.horizon                              # destandardize

    local = global_ = gate = 0
    if mechanism in ("baseline", "mica"):
        rows = c * n * p
        local = lyr * (rows * 2 * p * dk + rows * p +            # scores+scale
                       _softmax_flops(rows, p) +
                       rows * 2 * p * dv)                        # @ values
    else:  # concat: every channel attends over all C*P tokens
        rows = n * tokens
        local = lyr * (rows * 2 * tokens * dk + rows * tokens +
                       _softmax_flops(rows, tokens) +
                       rows * 2 * tokens * dv)

    if mechanism == "mica":
        m = cfg.mica
        per_layer_global = (
            c * n * p * dk                      # phi(K)
            + c * n * 2 * dk * p * dv           # phi(K)^T V per channel
            + c * n * dk * p                    # z per channel
            + c * n * dk * dv + c * n * dk      # channel reduction of M, z
            + c * n * p * dk                    # phi(Q)
            + c * n * p * 2 * dk * dv           # read numerator
            + c * n * p * (2 * dk + 1)          # read denominator + eps
            + c * n * p * dv)                   # divide
        if m.weight_mode == "static":
            per_layer_global += c * n * (dk * dv + dk)
        elif m.weight_mode == "dynamic":
            per_layer_global += (c * n * p * m.d_q          # pool queries
                                 + c * n * (2 * m.d_q + 1)  # project
                                 + c * n * (dk * dv + dk))  # apply
        if m.exclusion:
            per_layer_global += c * n * (dk * dv + dk)
        global_ = lyr * per_layer_global

        mix_cost = 4 * c * n * p * dv
        if m.gate in ("mlp", "mlp_query"):
            in_dim = 2 * n * dv + (n * m.d_q if m.gate == "mlp_query" else 0)
            h = m.mlp_hidden
            per_token = _linear_flops(1, in_dim, h) + h
            for _ in range(m.mlp_layers - 2):
                per_token += _linear_flops(1, h, h) + h
            per_token += _linear_flops(1, h, n) + n
            gate = lyr * (tokens * per_token + mix_cost)
        else:
            n_beta = n * (c if m.channelwise else 1)
            gate = lyr * (n_beta + mix_cost)

    return FlopReport(mechanism=mechanism, n_channels=c, local_flops=local,
                      global_flops=global_, gate_flops=gate,
                      backbone_flops=backbone)


def count_params(cfg: ModelConfig, n_channels: int, mechanism: str) -> int:
    """Closed-form parameter count; must match the instantiated model."""
    if mechanism not in MECHANISMS:
        raise ValueError(f"unknown mechanism '{mechanism}'")
    c = n_channels
    p = patch_count(cfg.input_size, cfg.patch_len, cfg.stride)
    d, ff, n, lyr = cfg.d_model, cfg.ff_hidden, cfg.n_heads, cfg.n_layers
    dk, dv = cfg.d_k, cfg.d_v

    total = cfg.patch_len * d + d                                # embed
    per_layer = (3 * (d * n * dk + n * dk)                       # q,k,v
                 + n * dv * d + d                                # out proj
                 + 2 * 2 * d                                     # layer norms
                 + d * ff + ff + ff * d + d)                     # ffn
    total += lyr * per_layer
    if cfg.head_kind == "multivariate":
        total += c * (p * d * cfg.horizon + cfg.horizon)
    else:
        total += p * d * cfg.horizon + cfg.horizon

    if mechanism == "mica":
        m = cfg.mica
        if m.gate == "shared_beta":
            total += n
        elif m.gate == "layerwise_beta":
            total += n * lyr
        elif m.gate == "channelwise_beta":
            total += n * c
        elif m.gate == "layerwise_channelwise_beta":
            total += n * lyr * c
        else:
            in_dim = 2 * n * dv + (n * m.d_q if m.gate == "mlp_query" else 0)
            h = m.mlp_hidden
            per_gate = in_dim * h + h
            per_gate += (m.mlp_layers - 2) * (h * h + h)
            per_gate += h * n + n
            total += lyr * per_gate
        if m.weight_mode == "static":
            total += lyr * c
        elif m.weight_mode == "dynamic":
            total += lyr * (m.d_q + 1)
    return total


# -- quadratic reference forward ------------------------------------------------

def _gelu_np(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi)
                                    * (x + 0.044715 * x ** 3)))


def _ln_np(x, gain, shift, eps=1e-5):
    m = x.mean(axis=-1, keepdims=True)
    xc = x - m
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + shift


class ConcatForward:
    """Numpy forward of the backbone with one softmax attention over all
    C*P tokens; the O((PC)^2) reference the compressed path is measured
    against.  Scores are computed in row blocks per head to bound memory."""

    def __init__(self, cfg: ModelConfig, n_channels: int, seed: int = 0,
                 row_block: int = 1024):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.n_channels = n_channels
        self.row_block = row_block
        self.n_patches = patch_count(cfg.input_size, cfg.patch_len,
                                     cfg.stride)
        d, n, dk, dv, ff = (cfg.d_model, cfg.n_heads, cfg.d_k, cfg.d_v,
                            cfg.ff_hidden)

        def lin(n_in, n_out):
            lim = np.sqrt(6.0 / (n_in + n_out))
            return (rng.uniform(-lim, lim, size=(n_in, n_out)),
                    np.zeros(n_out))

        self.embed = lin(cfg.patch_len, d)
        self.pos = sincos_table(self.n_patches, d)
        self.layers = []
        for _ in range(cfg.n_layers):
            self.layers.append(dict(
                wq=lin(d, n * dk), wk=lin(d, n * dk), wv=lin(d, n * dv),
                wo=lin(n * dv, d), up=lin(d, ff), down=lin(ff, d),
                g1=np.ones(d), b1=np.zeros(d),
                g2=np.ones(d), b2=np.zeros(d)))
        self.head = lin(self.n_patches * d, cfg.horizon)

    def _attend(self, x):
        """x: (B, T, d) -> (B, T, N*dv) with full token-token softmax."""
        cfg = self.cfg
        n, dk, dv = cfg.n_heads, cfg.d_k, cfg.d_v
        b, t, _ = x.shape
        lay = self._current
        q = (x @ lay["wq"][0] + lay["wq"][1]).reshape(b, t, n, dk)
        k = (x @ lay["wk"][0] + lay["wk"][1]).reshape(b, t, n, dk)
        v = (x @ lay["wv"][0] + lay["wv"][1]).reshape(b, t, n, dv)
        scale = 1.0 / np.sqrt(dk)
        out = np.empty((b, t, n, dv))
        for ni in range(n):
            qn = q[:, :, ni] * scale
            kn_t = k[:, :, ni].swapaxes(-1, -2)
            vn = v[:, :, ni]
            for i0 in range(0, t, self.row_block):
                i1 = min(i0 + self.row_block, t)
                s = np.matmul(qn[:, i0:i1], kn_t)
                s -= s.max(axis=-1, keepdims=True)
                np.exp(s, out=s)
                s /= s.sum(axis=-1, keepdims=True)
                out[:, i0:i1, ni] = np.matmul(s, vn)
        return out.reshape(b, t, n * dv)

    def __call__(self, y: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        y = np.asarray(y, dtype=np.float64)
        b, c, _ = y.shape
        y_std, stats = standardize(y)
        tokens = patchify(y_std, cfg.patch_len, cfg.stride)
        h = tokens @ self.embed[0] + self.embed[1] + self.pos
        p, d = self.n_patches, cfg.d_model
        h = h.reshape(b, c * p, d)
        for lay in self.layers:
            self._current = lay
            attn = self._attend(h) @ lay["wo"][0] + lay["wo"][1]
            h = _ln_np(h + attn, lay["g1"], lay["b1"])
            ffn = _gelu_np(h @ lay["up"][0] + lay["up"][1])
            ffn = ffn @ lay["down"][0] + lay["down"][1]
            h = _ln_np(h + ffn, lay["g2"], lay["b2"])
        flat = h.reshape(b, c, p * d)
        pred = flat @ self.head[0] + self.head[1]
        return pred * stats.std + stats.mean


# -- timing -----------------------------------------------------------------------

_THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS")


def ensure_single_thread() -> None:
    """Refuse to time anything while BLAS thread pools exceed one thread."""
    try:
        import threadpoolctl
    except ImportError:
        bad = [v for v in _THREAD_ENV_VARS if os.environ.get(v) != "1"]
        if bad:
            raise RuntimeError(
                "cannot verify single-thread execution (threadpoolctl not "
                f"installed); set {', '.join(bad)}=1") from None
        return
    pools = threadpoolctl.threadpool_info()
    offenders = [p["internal_api"] for p in pools
                 if p.get("num_threads", 1) > 1]
    if offenders:
        raise RuntimeError(
            f"thread pools not limited to 1 thread: {offenders}; wrap the "
            "benchmark in threadpoolctl.threadpool_limits(1)")


def limit_threads() -> None:
    """Pin BLAS pools to one thread when threadpoolctl is available."""
    try:
        import threadpoolctl
    except ImportError:
        return
    threadpoolctl.threadpool_limits(1)


@dataclass
class LatencyStats:
    mean_ms: float
    min_ms: float
    max_ms: float
    repeats: int


def measure_latency(fn, repeats: int = 100, warmup: int = 10) -> LatencyStats:
    """Mean wall-clock of ``fn()`` after warmup runs; single thread only."""
    ensure_single_thread()
    if repeats < 1 or warmup < 0:
        raise ValueError("need repeats >= 1 and warmup >= 0")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    arr = np.asarray(times)
    return LatencyStats(mean_ms=float(arr.mean()), min_ms=float(arr.min()),
                        max_ms=float(arr.max()), repeats=repeats)


# -- scaling fits -------------------------------------------------------------------

@dataclass
class ScalingFit:
    """Least-squares slope of log(cost) against log(size)."""
    exponent: float
    r2: float
    sizes: tuple
    costs: tuple


def fit_scaling(sizes, costs) -> ScalingFit:
    sizes = np.asarray(sizes, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    if sizes.size < 4:
        raise ValueError("need at least 4 sweep points for a scaling fit")
    if np.any(np.diff(sizes) <= 0):
        raise ValueError("sweep sizes must be strictly increasing")
    if np.any(sizes <= 0) or np.any(costs <= 0):
        raise ValueError("sizes and costs must be positive")
    lx, ly = np.log(sizes), np.log(costs)
    slope, intercept = np.polyfit(lx, ly, 1)
    fitted = slope * lx + intercept
    ss_res = float(np.sum((ly - fitted) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ScalingFit(exponent=float(slope), r2=r2, sizes=tuple(sizes),
                      costs=tuple(costs))


# -- sweeps -------------------------------------------------------------------------

@dataclass
class BenchRow:
    mechanism: str
    size: int                 # the swept value (channels or input length)
    flops: FlopReport
    params: int
    latency: LatencyStats | None = None


def _forward_fn(cfg: ModelConfig, n_channels: int, mechanism: str,
                seed: int = 0):
    rng = np.random.default_rng(seed + 1)
    window = rng.normal(size=(1, n_channels, cfg.input_size))
    if mechanism == "concat":
        runner = ConcatForward(cfg, n_channels, seed=seed)
        return lambda: runner(window)
    model_cfg = cfg if mechanism == "mica" else ModelConfig(
        **{**_cfg_dict(cfg), "mica": None})
    model = ForecastModel(model_cfg, n_channels, seed=seed)

    def run():
        with no_grad():
            model.forward(window)
    return run


def _cfg_dict(cfg: ModelConfig) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


def sweep_channels(cfg: ModelConfig, grid, mechanisms=MECHANISMS,
                   measure: bool = False, repeats: int = 5, warmup: int = 1,
                   seed: int = 0) -> list[BenchRow]:
    """Cost rows for each mechanism across a channel-count grid."""
    rows = []
    for mech in mechanisms:
        for c in grid:
            rep = count_flops(cfg, c, mech)
            params = count_params(cfg, c, mech)
            lat = None
            if measure:
                lat = measure_latency(_forward_fn(cfg, c, mech, seed),
                                      repeats=repeats, warmup=warmup)
            rows.append(BenchRow(mechanism=mech, size=c, flops=rep,
                                 params=params, latency=lat))
    return rows


def sweep_lengths(cfg: ModelConfig, grid, mechanisms=MECHANISMS,
                  n_channels: int = 7, measure: bool = False,
                  repeats: int = 5, warmup: int = 1,
                  seed: int = 0) -> list[BenchRow]:
    """Cost rows across input-window lengths at fixed channel count."""
    rows = []
    for mech in mechanisms:
        for length in grid:
            sized = ModelConfig(**{**_cfg_dict(cfg), "input_size": length})
            rep = count_flops(sized, n_channels, mech)
            params = count_params(sized, n_channels, mech)
            lat = None
            if measure:
                lat = measure_latency(
                    _forward_fn(sized, n_channels, mech, seed),
                    repeats=repeats, warmup=warmup)
            rows.append(BenchRow(mechanism=mech, size=length, flops=rep,
                                 params=params, latency=lat))
    return rows
