"""Why one-bit upscaling breaks on uniform quantization.

Three experiments on synthetic data:

* round-to-nearest bin splitting: refining a uniform grid by halving each bin
  keeps the code prefix property but re-centers every representative;
* reusing scale/clip preprocessing searched for the seed bit-width instead of
  searching per bit-width;
* column-by-column error-compensated quantization where the refined codes are
  clamped into the two-code window inherited from the seed model. The clamp
  perturbs compensation, compensation drifts the remaining columns, and the
  drift forces more clamping; the per-column trace records that feedback.

Uniform grids here are per output channel: grid point i sits at z + i*s for
i in [0, 2**n). Ties at bin boundaries always take the lower code, matching
the tie rule of the bin-splitting step.

The error-compensation update is the standard one: with U the upper Cholesky
factor of the damped inverse Hessian, quantizing column i with residual e
subtracts (e / U[i,i]) * U[i, i:] from the remaining columns, which also
lands the dequantized value in column i itself.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class UniformQuantParams:
    """Per-channel uniform grid: z + i*s for i in [0, 2**bits)."""

    scale: np.ndarray  # (rows,) > 0
    zero: np.ndarray   # (rows,) value of code 0
    bits: int

    def __post_init__(self):
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        self.zero = np.atleast_1d(np.asarray(self.zero, dtype=np.float64))
        if self.scale.shape != self.zero.shape:
            raise ShapeError("scale/zero length mismatch")
        if np.any(self.scale <= 0):
            raise ParameterError("scales must be positive")
        if not 1 <= self.bits <= 16:
            raise ParameterError(f"bit width {self.bits} outside [1, 16]")

    @property
    def levels(self) -> int:
        return 1 << self.bits


@dataclass
class LabTrace:
    """Per-column divergence record of the clamped compensation run.

    ``rmsd[i]`` is the RMS difference between the two runs' error-compensated
    weights over the columns still unquantized after step i (the region where
    compensation feedback lives; the already-quantized columns differ by a
    construction-fixed quarter step). The final entry, with nothing left to
    compare, is zero.
    """

    rmsd: np.ndarray        # RMS divergence of the not-yet-quantized columns
    mean_clamp: np.ndarray  # average clamping magnitude per weight, value units


def rtn_params(weights, bits: int) -> UniformQuantParams:
    """Per-channel min-max grid; constant channels get a unit scale."""
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    lo = weights.min(axis=1)
    hi = weights.max(axis=1)
    span = hi - lo
    scale = np.where(span > 0, span / ((1 << bits) - 1), 1.0)
    return UniformQuantParams(scale, lo, bits)


def rtn_quantize(weights, params: UniformQuantParams):
    """codes = clamp(round((w - z) / s)); ties at bin boundaries round down.

    Returns (codes, dequantized) with dequantized = z + codes * s.
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    z = params.zero[:, None]
    s = params.scale[:, None]
    q = np.ceil((weights - z) / s - 0.5)  # round half down
    codes = np.clip(q, 0, params.levels - 1).astype(np.int64)
    return codes, z + codes * s


def rtn_dequantize(codes, params: UniformQuantParams) -> np.ndarray:
    codes = np.atleast_2d(np.asarray(codes))
    return params.zero[:, None] + codes * params.scale[:, None]


def refine_params(params: UniformQuantParams) -> UniformQuantParams:
    """The grid after splitting every bin at its midpoint.

    Sub-bin representatives sit a quarter step either side of the old grid
    point: scale halves and the zero point shifts down by s/4.
    """
    return UniformQuantParams(
        params.scale / 2.0, params.zero - params.scale / 4.0, params.bits + 1
    )


def rtn_upscale(weights, codes, params: UniformQuantParams):
    """Split every bin at its midpoint; members above the old representative
    move to the upper sub-bin (ties keep the lower one).

    Returns (codes at bits+1, refined params). The old code is always the new
    code's bit prefix.
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    codes = np.atleast_2d(np.asarray(codes))
    if weights.shape != codes.shape:
        raise ShapeError("weights/codes shape mismatch")
    centers = rtn_dequantize(codes, params)
    upper = weights > centers
    return 2 * codes + upper.astype(np.int64), refine_params(params)


@dataclass
class AwqSearchResult:
    """Outcome of the per-channel scale/clip grid search."""

    scaled_weights: np.ndarray   # W with its per-row column scaling applied
    params: UniformQuantParams
    col_scales: np.ndarray       # (rows, in) multipliers applied to W
    alpha: np.ndarray            # (rows,) chosen scale exponents
    clip: np.ndarray             # (rows,) chosen clip ratios
    objective: np.ndarray        # (rows,) achieved search objective
    weight_only: bool            # True when calibration was degenerate

    def reconstruct(self, codes) -> np.ndarray:
        """Dequantize codes on the scaled grid and undo the column scaling."""
        return rtn_dequantize(codes, self.params) / self.col_scales


ALPHA_GRID = np.linspace(0.0, 1.0, 20)
CLIP_GRID = np.linspace(0.5, 1.0, 20)


def awq_like_preprocess(weights, calib, bits: int) -> AwqSearchResult:
    """Search per-channel activation scaling and range clipping for one grid.

    For every output channel the search tries 20 scale exponents applied to
    per-column mean activation magnitudes and 20 clip ratios shrinking the
    min-max range, quantizes the scaled row, and keeps the candidate whose
    reconstruction error against the calibration activations is smallest.
    Identity (exponent 0, clip 1) is always a candidate, so the result is
    never worse than no preprocessing. All-zero calibration falls back to a
    weight-only squared-error objective (flagged).
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    calib = np.atleast_2d(np.asarray(calib, dtype=np.float64))
    rows, cols = weights.shape
    if calib.shape[1] != cols:
        raise ShapeError(
            f"calibration has {calib.shape[1]} columns, weights have {cols}"
        )

    col_mag = np.mean(np.abs(calib), axis=0)
    weight_only = not np.any(col_mag > 0)
    if weight_only:
        log.warning("all-zero calibration; scale search disabled, weight-only objective")
        scales_by_alpha = np.ones((len(ALPHA_GRID), cols))
    else:
        safe = np.where(col_mag > 0, col_mag, col_mag[col_mag > 0].min())
        log_norm = np.log(safe) - np.mean(np.log(safe))
        scales_by_alpha = np.exp(ALPHA_GRID[:, None] * log_norm[None, :])

    best_obj = np.full(rows, np.inf)
    best_alpha = np.zeros(rows)
    best_clip = np.ones(rows)
    best_scales = np.ones((rows, cols))
    best_z = np.zeros(rows)
    best_s = np.ones(rows)

    xt = calib.T  # (cols, samples)
    for ai, alpha in enumerate(ALPHA_GRID):
        cs = scales_by_alpha[ai]
        w_scaled = weights * cs[None, :]
        lo = w_scaled.min(axis=1)
        hi = w_scaled.max(axis=1)
        for clip in CLIP_GRID:
            z = lo * clip
            span = (hi - lo) * clip
            s = np.where(span > 0, span / ((1 << bits) - 1), 1.0)
            p = UniformQuantParams(s, z, bits)
            _, deq = rtn_quantize(w_scaled, p)
            recon = deq / cs[None, :]
            diff = recon - weights
            if weight_only:
                obj = np.sum(diff * diff, axis=1)
            else:
                err = diff @ xt
                obj = np.sum(err * err, axis=1)
            better = obj < best_obj
            if np.any(better):
                best_obj[better] = obj[better]
                best_alpha[better] = alpha
                best_clip[better] = clip
                best_scales[better] = cs[None, :]
                best_z[better] = z[better]
                best_s[better] = s[better]

    params = UniformQuantParams(best_s, best_z, bits)
    return AwqSearchResult(
        scaled_weights=weights * best_scales,
        params=params,
        col_scales=best_scales,
        alpha=best_alpha,
        clip=best_clip,
        objective=best_obj,
        weight_only=weight_only,
    )


def awq_objective(weights, recon, calib) -> np.ndarray:
    """Per-row squared reconstruction error through the calibration set."""
    diff = np.atleast_2d(recon) - np.atleast_2d(weights)
    err = diff @ np.atleast_2d(calib).T
    return np.sum(err * err, axis=1)


def make_hessian(calib, damp: float = 0.01) -> np.ndarray:
    """H = X^T X + damp * mean(diag) * I from calibration activations."""
    calib = np.atleast_2d(np.asarray(calib, dtype=np.float64))
    h = calib.T @ calib
    h += damp * np.mean(np.diag(h)) * np.eye(h.shape[0])
    return h


def _inverse_cholesky_upper(h: np.ndarray, retries: int = 3) -> np.ndarray:
    """Upper Cholesky factor U with inv(H) = U^T U; re-damps when H is not PD."""
    damp = 0.01 * float(np.mean(np.diag(h)))
    if damp <= 0:
        damp = 1e-8
    hd = h
    for attempt in range(retries + 1):
        try:
            np.linalg.cholesky(hd)  # PD probe
            hinv = np.linalg.inv(hd)
            hinv = (hinv + hinv.T) / 2.0
            return np.linalg.cholesky(hinv).T
        except np.linalg.LinAlgError:
            if attempt == retries:
                raise ParameterError(
                    f"hessian not positive definite after {retries} re-damping attempts"
                )
            log.warning(
                "hessian not positive definite; increasing damping to %.3e", damp
            )
            hd = h + damp * np.eye(h.shape[0])
            damp *= 10.0


@dataclass
class GptqResult:
    codes: np.ndarray
    params: UniformQuantParams
    dequantized: np.ndarray
    mean_clamp: np.ndarray  # per-column average clamp magnitude, value units


def gptq_quantize(weights, hessian, bits: int) -> GptqResult:
    """Column-wise error-compensated uniform quantization (no clamping)."""
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    params = rtn_params(weights, bits)
    u = _inverse_cholesky_upper(np.asarray(hessian, dtype=np.float64))
    codes, _, clamp, _ = _compensated_run(weights, params, u, clamp_base=None)
    return GptqResult(codes, params, rtn_dequantize(codes, params), clamp)


def _quantize_column(w_col, params: UniformQuantParams):
    q = np.ceil((w_col - params.zero) / params.scale - 0.5)
    return np.clip(q, 0, params.levels - 1).astype(np.int64)


def _compensated_run(weights, params, u, clamp_base, lockstep=None):
    """Shared column loop; optionally advances a second run in lockstep.

    ``lockstep`` is a callable invoked after each column with the evolving
    weight matrix, for divergence tracing against another run.
    """
    rows, cols = weights.shape
    wst = weights.copy()
    codes = np.zeros((rows, cols), dtype=np.int64)
    mean_clamp = np.zeros(cols)
    for i in range(cols):
        q = _quantize_column(wst[:, i], params)
        if clamp_base is not None:
            lo = 2 * clamp_base[:, i]
            qc = np.clip(q, lo, lo + 1)
            mean_clamp[i] = float(np.mean(np.abs(qc - q) * params.scale))
            q = qc
        codes[:, i] = q
        deq = params.zero + q * params.scale
        err = (wst[:, i] - deq) / u[i, i]
        wst[:, i:] -= np.outer(err, u[i, i:])
        if lockstep is not None:
            lockstep(i, wst)
    return codes, wst, mean_clamp, params


def gptq_upscale_clamped(weights, seed_codes, hessian, bits: int):
    """Refine a compensated n-bit model to n+1 bits under code inheritance.

    Every column is re-quantized on the refined grid and clamped into
    [2q, 2q+1] where q is the seed code, then the residual is propagated to
    the remaining columns. In lockstep, the plain n-bit run is replayed so the
    returned trace records, per column, the RMS divergence between the two
    evolving error-compensated weight matrices alongside the average clamp
    magnitude.

    Returns (GptqResult at bits+1, LabTrace).
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    seed_codes = np.atleast_2d(np.asarray(seed_codes))
    if seed_codes.shape != weights.shape:
        raise ShapeError("seed codes shape must match weights")
    cols = weights.shape[1]

    params_n = rtn_params(weights, bits)
    params_up = refine_params(params_n)
    u = _inverse_cholesky_upper(np.asarray(hessian, dtype=np.float64))

    # Replayed seed run, advanced one column at a time by the lockstep hook.
    wst_seed = weights.copy()
    rmsd = np.zeros(cols)

    def advance_seed(i, wst_up):
        q = _quantize_column(wst_seed[:, i], params_n)
        deq = params_n.zero + q * params_n.scale
        err = (wst_seed[:, i] - deq) / u[i, i]
        wst_seed[:, i:] -= np.outer(err, u[i, i:])
        remaining = wst_up[:, i + 1 :] - wst_seed[:, i + 1 :]
        if remaining.size:
            rmsd[i] = float(np.linalg.norm(remaining) / np.sqrt(remaining.size))

    codes, _, mean_clamp, _ = _compensated_run(
        weights, params_up, u, clamp_base=seed_codes, lockstep=advance_seed
    )
    result = GptqResult(codes, params_up, rtn_dequantize(codes, params_up), mean_clamp)
    return result, LabTrace(rmsd=rmsd, mean_clamp=mean_clamp)


def weighted_reconstruction_error(weights, dequantized, hessian) -> float:
    """tr((W - Q) H (W - Q)^T) / size: the calibration-weighted quality proxy."""
    d = np.atleast_2d(weights) - np.atleast_2d(dequantized)
    return float(np.einsum("ij,jk,ik->", d, hessian, d) / d.size)


def make_correlated_calibration(rng, samples: int, cols: int, correlation: float):
    """Gaussian activations whose columns follow an AR(1) correlation profile."""
    if not 0 <= correlation < 1:
        raise ParameterError("correlation must be in [0, 1)")
    z = rng.standard_normal((samples, cols))
    if correlation == 0:
        return z
    idx = np.arange(cols)
    cov = correlation ** np.abs(idx[:, None] - idx[None, :])
    chol = np.linalg.cholesky(cov)
    return z @ chol.T


@dataclass
class LabConfig:
    seed: int = 0
    rows: int = 64
    cols: int = 64
    samples: int = 256
    correlation: float = 0.95
    seed_bits: int = 3

    @classmethod
    def from_dict(cls, d: dict) -> "LabConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ParameterError(f"unknown lab config keys: {sorted(bad)}")
        return cls(**d)


def run_gptq_clamp_experiment(cfg: LabConfig) -> dict:
    """Seed-vs-upscaled compensated quantization on one synthetic layer.

    Returns the per-column trace plus the weighted error of the upscaled
    model against a directly quantized one at the same bit-width.
    """
    rng = np.random.default_rng(cfg.seed)
    weights = rng.standard_normal((cfg.rows, cfg.cols))
    calib = make_correlated_calibration(rng, cfg.samples, cfg.cols, cfg.correlation)
    hessian = make_hessian(calib)

    seed = gptq_quantize(weights, hessian, cfg.seed_bits)
    upscaled, trace = gptq_upscale_clamped(weights, seed.codes, hessian, cfg.seed_bits)
    direct = gptq_quantize(weights, hessian, cfg.seed_bits + 1)

    return {
        "trace": trace,
        "upscaled_error": weighted_reconstruction_error(
            weights, upscaled.dequantized, hessian
        ),
        "direct_error": weighted_reconstruction_error(
            weights, direct.dequantized, hessian
        ),
        "direct_mean_clamp": direct.mean_clamp,
        "prefix_ok": bool(np.array_equal(upscaled.codes >> 1, seed.codes)),
    }


def run_awq_reuse_experiment(cfg: LabConfig, bits=(4, 5, 6)) -> list[dict]:
    """Reused seed preprocessing vs per-bit-width search, one row per bit-width."""
    rng = np.random.default_rng(cfg.seed)
    weights = rng.standard_normal((cfg.rows, cfg.cols))
    calib = make_correlated_calibration(rng, cfg.samples, cfg.cols, cfg.correlation)

    seed_search = awq_like_preprocess(weights, calib, cfg.seed_bits)
    codes, _ = rtn_quantize(seed_search.scaled_weights, seed_search.params)
    params = seed_search.params

    out = []
    for k in sorted(bits):
        if k <= cfg.seed_bits:
            raise ParameterError("target bits must exceed the seed bit-width")
        while params.bits < k:
            codes, params = rtn_upscale(seed_search.scaled_weights, codes, params)
        reused_recon = rtn_dequantize(codes, params) / seed_search.col_scales
        reused = float(np.sum(awq_objective(weights, reused_recon, calib)))

        direct_search = awq_like_preprocess(weights, calib, k)
        direct_codes, _ = rtn_quantize(direct_search.scaled_weights, direct_search.params)
        direct_recon = direct_search.reconstruct(direct_codes)
        direct = float(np.sum(awq_objective(weights, direct_recon, calib)))
        out.append({"bits": k, "reused_error": reused, "direct_error": direct})
    return out
