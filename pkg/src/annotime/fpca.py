"""Functional PCA of encounter-time densities and derived intensity features.

Encounter times of each patient are divided by the patient's censor time so
that every scaled density lives on [0, 1].  Per channel we estimate

* the mean density by a pooled Gaussian kernel smoother,
* the covariance ``G(t, s) = g(t, s) - mu(t) mu(s)`` where ``g`` smooths all
  ordered pairs of distinct encounters within a patient,
* eigenpairs of the discretized covariance operator,
* subject scores ``mean_l phi_k(x_il) - int mu phi_k`` and the truncated,
  renormalized subject density.

Both smoothers reflect the kernel at 0 and 1.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data_model import CohortData, Patient

__all__ = [
    "KernelConfig",
    "ChannelFpca",
    "FpcaModel",
    "SubjectDensity",
    "FeatureMatrix",
    "FeatureBuilder",
    "trapezoid_weights",
    "default_bandwidth",
    "estimate_mean_density",
    "estimate_covariance",
    "eigendecompose",
    "estimate_scores",
    "reconstruct_density",
    "extract_features",
    "fit_fpca",
    "build_feature_matrix",
]

log = logging.getLogger(__name__)

RATIO_EPS = 1e-6
ESTIMATED_FEATURES = ("log_first_arrival", "log_peak", "logit_ratio")
DEGENERATE_FEATURES = ("log_first_arrival", "log_count")
ALL_FEATURES = ("log_first_arrival", "log_peak", "logit_ratio", "first_score", "log_count")


@dataclass(frozen=True)
class KernelConfig:
    """Smoothing settings; ``None`` bandwidths are chosen by the rule of thumb."""

    h_mu: float | None = None
    h_g: float | None = None
    grid_size: int = 101

    def __post_init__(self):
        if self.grid_size < 21:
            raise ValueError("grid_size must be >= 21")
        for name in ("h_mu", "h_g"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.grid_size)


def trapezoid_weights(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    w = np.zeros(grid.size)
    dx = np.diff(grid)
    w[:-1] += dx / 2
    w[1:] += dx / 2
    return w


def _reflected_kernel(x, grid, h) -> np.ndarray:
    """Gaussian kernel with reflection at 0 and 1: rows are points, columns grid."""
    x = np.asarray(x, dtype=float)[:, None]
    t = grid[None, :]
    c = 1.0 / (h * np.sqrt(2.0 * np.pi))
    out = np.exp(-0.5 * ((t - x) / h) ** 2)
    out += np.exp(-0.5 * ((t + x) / h) ** 2)
    out += np.exp(-0.5 * ((t - (2.0 - x)) / h) ** 2)
    return c * out


def default_bandwidth(pooled) -> float:
    """Silverman-type ``0.9 min(sd, IQR/1.34) M^{-1/5}`` on scaled times."""
    x = np.asarray(pooled, dtype=float)
    if x.size < 2:
        return 0.1
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    if not spread > 0:
        spread = 0.1
    return float(max(0.9 * spread * x.size ** (-0.2), 1e-3))


def estimate_mean_density(scaled_times, h_mu: float, grid) -> np.ndarray:
    """Pooled kernel density of all scaled encounter times on ``grid``.

    ``scaled_times`` is a sequence of per-subject arrays.  Raises
    ``ValueError`` when the channel has no encounters.
    """
    pooled = np.concatenate([np.asarray(s, float) for s in scaled_times]) if len(scaled_times) else np.zeros(0)
    if pooled.size == 0:
        raise ValueError("no encounters on this channel")
    grid = np.asarray(grid, dtype=float)
    total = np.zeros(grid.size)
    for lo in range(0, pooled.size, 4096):
        total += _reflected_kernel(pooled[lo:lo + 4096], grid, h_mu).sum(axis=0)
    return total / pooled.size


def estimate_covariance(scaled_times, mean_density, h_g: float, grid) -> np.ndarray:
    """Covariance surface of the scaled densities on ``grid x grid``.

    Uses a product Gaussian kernel (reflected in each coordinate) over all
    ordered pairs of distinct encounters of the same subject.  Raises
    ``ValueError`` if no subject has two or more encounters.
    """
    grid = np.asarray(grid, dtype=float)
    g = np.zeros((grid.size, grid.size))
    pairs = 0
    batch, sizes = [], []
    pending = 0

    def flush():
        nonlocal g, pending
        pending = 0
        K = _reflected_kernel(np.concatenate(batch), grid, h_g)
        V = np.add.reduceat(K, np.concatenate([[0], np.cumsum(sizes)[:-1]]), axis=0)
        g += V.T @ V - K.T @ K
        batch.clear()
        sizes.clear()

    for s in scaled_times:
        s = np.asarray(s, dtype=float)
        m = s.size
        if m < 2:
            continue
        batch.append(s)
        sizes.append(m)
        pairs += m * (m - 1)
        pending += m
        if pending > 8192:
            flush()
    if batch:
        flush()
    if pairs == 0:
        raise ValueError("no subject has two or more encounters on this channel")
    mu = np.asarray(mean_density, dtype=float)
    G = g / pairs - np.outer(mu, mu)
    return 0.5 * (G + G.T)


def eigendecompose(G, grid, pve: float = 0.9):
    """Eigenpairs of the integral operator with kernel ``G`` under trapezoid quadrature.

    Returns ``(eigenvalues, eigenfunctions, K)`` where only positive
    eigenvalues are kept (descending), eigenfunction columns satisfy
    ``sum w phi_k phi_l = delta_kl`` and ``K`` is the smallest number of
    components whose share of the positive eigenvalue sum reaches ``pve``.
    """
    if not 0 < pve <= 1:
        raise ValueError("pve must lie in (0, 1]")
    G = np.asarray(G, dtype=float)
    w = trapezoid_weights(grid)
    sw = np.sqrt(w)
    # endpoint weights are positive for any grid with >= 2 points
    A = sw[:, None] * G * sw[None, :]
    vals, vecs = np.linalg.eigh(0.5 * (A + A.T))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    scale = np.abs(vals).max() if vals.size else 0.0
    keep = vals > max(scale, 1.0) * 1e-13
    vals, vecs = vals[keep], vecs[:, keep]
    phis = vecs / sw[:, None]
    # sign convention: largest-magnitude entry positive
    idx = np.argmax(np.abs(phis), axis=0)
    signs = np.sign(phis[idx, np.arange(phis.shape[1])])
    signs[signs == 0] = 1.0
    phis = phis * signs
    if vals.size == 0:
        return vals, phis, 0
    share = np.cumsum(vals) / vals.sum()
    K = int(np.searchsorted(share, pve - 1e-12) + 1)
    return vals, phis, min(K, vals.size)


@dataclass
class ChannelFpca:
    """Fitted FPCA components for one channel."""

    channel: int
    grid: np.ndarray
    mean_density: np.ndarray | None
    covariance: np.ndarray | None
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray  # grid x n_positive
    K: int
    h_mu: float | None
    h_g: float | None
    degenerate: str | None = None  # None, "no_encounters" or "no_pairs"

    @property
    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.grid)

    @property
    def phi(self) -> np.ndarray:
        return self.eigenfunctions[:, : self.K]

    def to_dict(self, include_covariance: bool = False) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "channel": self.channel,
            "grid": arr(self.grid),
            "mean_density": arr(self.mean_density),
            "covariance": arr(self.covariance) if include_covariance else None,
            "eigenvalues": arr(self.eigenvalues),
            "eigenfunctions": arr(self.eigenfunctions[:, : max(self.K, 0)]),
            "K": self.K,
            "h_mu": self.h_mu,
            "h_g": self.h_g,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelFpca":
        grid = np.asarray(d["grid"], float)
        ef = np.asarray(d["eigenfunctions"], float).reshape(grid.size, -1)
        return cls(
            channel=int(d["channel"]), grid=grid,
            mean_density=None if d["mean_density"] is None else np.asarray(d["mean_density"], float),
            covariance=None if d.get("covariance") is None else np.asarray(d["covariance"], float),
            eigenvalues=np.asarray(d["eigenvalues"], float), eigenfunctions=ef, K=int(d["K"]),
            h_mu=d["h_mu"], h_g=d["h_g"], degenerate=d.get("degenerate"),
        )


@dataclass
class FpcaModel:
    channels: list
    pve: float
    fit_on: str = "pooled"

    @property
    def q(self) -> int:
        return len(self.channels)

    def to_dict(self, include_covariance: bool = False) -> dict:
        return {
            "pve": self.pve,
            "fit_on": self.fit_on,
            "channels": [c.to_dict(include_covariance) for c in self.channels],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FpcaModel":
        return cls([ChannelFpca.from_dict(c) for c in d["channels"]], float(d["pve"]), d.get("fit_on", "pooled"))


def fit_channel(scaled_times, channel: int, cfg: KernelConfig, pve: float) -> ChannelFpca:
    grid = cfg.grid
    pooled = np.concatenate([np.asarray(s, float) for s in scaled_times]) if scaled_times else np.zeros(0)
    if pooled.size == 0:
        log.info("channel %d has no encounters; only arrival/count features are used", channel)
        return ChannelFpca(channel, grid, None, None, np.zeros(0), np.zeros((grid.size, 0)), 0,
                           None, None, "no_encounters")
    h_mu = cfg.h_mu if cfg.h_mu is not None else default_bandwidth(pooled)
    h_g = cfg.h_g if cfg.h_g is not None else 2.0 * h_mu
    mu = estimate_mean_density(scaled_times, h_mu, grid)
    try:
        G = estimate_covariance(scaled_times, mu, h_g, grid)
    except ValueError:
        log.info("channel %d has no subject with two encounters; mean-only model", channel)
        return ChannelFpca(channel, grid, mu, None, np.zeros(0), np.zeros((grid.size, 0)), 0,
                           h_mu, h_g, "no_pairs")
    vals, phis, K = eigendecompose(G, grid, pve)
    return ChannelFpca(channel, grid, mu, G, vals, phis, K, h_mu, h_g, None)


def fit_fpca(
    cohort: CohortData,
    cfg: KernelConfig | None = None,
    pve: float = 0.9,
    fit_on: str = "pooled",
) -> FpcaModel:
    """Fit the per-channel FPCA on the pooled cohort or on unlabeled patients only."""
    cfg = cfg or KernelConfig()
    if fit_on == "pooled":
        patients = cohort.patients
    elif fit_on == "unlabeled":
        patients = cohort.unlabeled
    else:
        raise ValueError(f"fit_on must be 'pooled' or 'unlabeled', got {fit_on!r}")
    channels = []
    for j in range(1, cohort.q + 1):
        scaled = [p.channels[j - 1].times / p.censor_time for p in patients]
        channels.append(fit_channel(scaled, j, cfg, pve))
    return FpcaModel(channels, pve, fit_on)


# ---------------------------------------------------------------------------
# per-subject quantities, vectorized over subjects of one channel
# ---------------------------------------------------------------------------

def _scores_many(scaled_list, ch: ChannelFpca) -> np.ndarray:
    n = len(scaled_list)
    K = ch.K
    if K == 0 or ch.mean_density is None:
        return np.zeros((n, K))
    counts = np.array([len(s) for s in scaled_list])
    pooled = np.concatenate([np.asarray(s, float) for s in scaled_list]) if n else np.zeros(0)
    owner = np.repeat(np.arange(n), counts)
    phi = ch.phi
    w = ch.weights
    centre = (w * ch.mean_density) @ phi
    scores = np.zeros((n, K))
    for k in range(K):
        vals = np.interp(pooled, ch.grid, phi[:, k])
        sums = np.bincount(owner, weights=vals, minlength=n)
        with np.errstate(invalid="ignore", divide="ignore"):
            scores[:, k] = np.where(counts > 0, sums / np.maximum(counts, 1) - centre[k], 0.0)
    return scores


def _scaled_curves(scores, ch: ChannelFpca):
    """Truncated scaled densities (rows) and their integrals over [0, 1]."""
    base = ch.mean_density
    curves = base[None, :] + scores @ ch.phi.T if ch.K else np.repeat(base[None, :], scores.shape[0], axis=0)
    curves = np.maximum(curves, 0.0)
    mass = curves @ ch.weights
    bad = mass < 1e-10
    if np.any(bad):
        warnings.warn(f"{int(bad.sum())} reconstructed densities vanished; using the mean density",
                      RuntimeWarning)
        fallback = np.maximum(base, 0.0)
        curves[bad] = fallback
        mass[bad] = fallback @ ch.weights
    return curves, mass


@dataclass
class SubjectDensity:
    """Reconstructed encounter density of one subject on ``[0, C]``."""

    patient_id: str
    channel: int
    scores: np.ndarray
    times: np.ndarray     # C * grid
    density: np.ndarray   # integrates to 1 over [0, C] (trapezoid)
    intensity_scale: int  # observed count M_i

    @property
    def intensity(self) -> np.ndarray:
        return self.intensity_scale * self.density


def estimate_scores(p: Patient, model: FpcaModel | ChannelFpca, j: int | None = None) -> np.ndarray:
    """FPC scores of patient ``p`` on channel ``j`` (zeros without encounters)."""
    ch = model if isinstance(model, ChannelFpca) else model.channels[j - 1]
    jj = ch.channel
    return _scores_many([p.channels[jj - 1].times / p.censor_time], ch)[0]


def reconstruct_density(p: Patient, model: FpcaModel | ChannelFpca, scores=None, j: int | None = None) -> SubjectDensity:
    """Truncate ``mean + sum scores * phi`` at zero and rescale it to a density on ``[0, C]``."""
    ch = model if isinstance(model, ChannelFpca) else model.channels[j - 1]
    if ch.mean_density is None:
        raise ValueError(f"channel {ch.channel} has no encounters; no density to reconstruct")
    if scores is None:
        scores = estimate_scores(p, ch)
    scores = np.asarray(scores, dtype=float).reshape(1, -1)
    curves, mass = _scaled_curves(scores, ch)
    C = p.censor_time
    return SubjectDensity(p.id, ch.channel, scores[0], C * ch.grid, curves[0] / (C * mass[0]),
                          p.channels[ch.channel - 1].count)


def _clamped_log(x, floor):
    return np.log(np.maximum(x, floor))


def _feature_block(curves, C, first, counts, scores, grid):
    """Peak / change point / arrival features for many subjects of one channel."""
    n = curves.shape[0]
    step = grid[1] - grid[0]
    floor = 0.5 * step * C
    k_peak = np.argmax(curves, axis=1)
    peak = C * grid[k_peak]
    diffs = np.diff(curves, axis=1)
    k_cp = np.argmax(diffs, axis=1)
    cp = C * 0.5 * (grid[k_cp] + grid[k_cp + 1])
    flat = diffs[np.arange(n), k_cp] <= 0
    ratio = cp / np.maximum(peak, floor)
    clamped = (ratio <= RATIO_EPS) | (ratio >= 1 - RATIO_EPS)
    ratio = np.clip(ratio, RATIO_EPS, 1 - RATIO_EPS)
    return {
        "peak_time": peak,
        "change_point_time": cp,
        "first_arrival_time": first,
        "first_score": scores[:, 0] if scores.shape[1] else np.zeros(n),
        "count": counts,
        "log_peak": _clamped_log(peak, floor),
        "logit_ratio": np.log(ratio) - np.log1p(-ratio),
        "log_first_arrival": _clamped_log(first, floor),
        "log_count": np.log1p(counts),
        "monotone_flag": flat,
        "ratio_clamped": clamped,
    }


def extract_features(sd: SubjectDensity, p: Patient, j: int | None = None) -> dict:
    """Peak, change point, first arrival and their transforms for one subject/channel."""
    j = sd.channel if j is None else j
    C = p.censor_time
    times = p.channels[j - 1].times
    first = float(times[0]) if times.size else C
    grid = sd.times / C
    block = _feature_block(sd.density[None, :] * C, np.array([C]), np.array([first]),
                           np.array([times.size]), sd.scores[None, :], grid)
    return {k: (v[0].item() if hasattr(v[0], "item") else v[0]) for k, v in block.items()}


def channel_features(patients, ch: ChannelFpca) -> dict:
    """Feature columns for every patient on one channel."""
    j = ch.channel
    C = np.array([p.censor_time for p in patients])
    times = [p.channels[j - 1].times for p in patients]
    counts = np.array([t.size for t in times])
    first = np.array([t[0] if t.size else c for t, c in zip(times, C)])
    if ch.mean_density is None:
        n = len(patients)
        floor = 0.5 * (ch.grid[1] - ch.grid[0]) * C
        return {
            "first_arrival_time": first, "count": counts,
            "log_first_arrival": _clamped_log(first, floor), "log_count": np.log1p(counts),
            "monotone_flag": np.zeros(n, bool), "ratio_clamped": np.zeros(n, bool),
        }
    scaled = [t / c for t, c in zip(times, C)]
    scores = _scores_many(scaled, ch)
    curves, _ = _scaled_curves(scores, ch)
    return _feature_block(curves, C, first, counts, scores, ch.grid)


# ---------------------------------------------------------------------------
# feature matrix
# ---------------------------------------------------------------------------

@dataclass
class FeatureMatrix:
    """Design matrix ``Z = (U, W_1, ..., W_q)`` with its group map."""

    ids: list
    Z: np.ndarray
    columns: list
    groups: list          # list of column-index lists
    group_names: list
    diagnostics: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    def rows(self, ids) -> np.ndarray:
        pos = {pid: k for k, pid in enumerate(self.ids)}
        return self.Z[[pos[i] for i in ids]]

    def to_csv_text(self) -> str:
        import csv
        import io
        import json

        fh = io.StringIO()
        fh.write("# meta " + json.dumps(self.diagnostics, sort_keys=True) + "\n")
        for name, cols in zip(self.group_names, self.groups):
            fh.write(f"# group {name}: " + " ".join(str(c) for c in cols) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id"] + list(self.columns))
        for pid, row in zip(self.ids, self.Z):
            w.writerow([pid] + [repr(float(v)) for v in row])
        return fh.getvalue()

    def to_csv(self, path) -> None:
        """Write the matrix with its group map (and diagnostics) as ``#`` header lines."""
        from .data_model import write_text_atomic

        write_text_atomic(path, self.to_csv_text())

    @classmethod
    def from_csv(cls, path) -> "FeatureMatrix":
        import csv
        import json

        names, groups, lines, meta = [], [], [], {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("# group "):
                    head, cols = line[len("# group "):].rsplit(":", 1)
                    names.append(head.strip())
                    groups.append([int(c) for c in cols.split()])
                elif line.startswith("# meta "):
                    meta = json.loads(line[len("# meta "):])
                else:
                    lines.append(line)
        reader = csv.reader(lines)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: no header row") from None
        if not header or header[0] != "patient_id":
            raise ValueError(f"{path}: first column must be patient_id")
        ids, rows = [], []
        for k, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: data row {k} has {len(row)} fields, expected {len(header)}")
            ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
        Z = np.asarray(rows, dtype=float).reshape(len(ids), len(header) - 1)
        covered = sorted(c for g in groups for c in g)
        if covered != list(range(Z.shape[1])):
            raise ValueError(f"{path}: group map does not cover every feature column exactly once")
        return cls(ids, Z, header[1:], groups, names, meta)


class FeatureBuilder:
    """Turns patients into feature rows with a fixed FPCA model and group layout.

    Parameters
    ----------
    model : FpcaModel
    features : sequence of str
        Per-channel columns for channels with a fitted density; degenerate
        channels always contribute ``log_first_arrival`` and ``log_count``.
    pca_within_group : bool
        Replace each channel's columns by principal components reaching
        ``group_pve`` of their variance.
    standardize_baseline : bool
        Center and scale baseline covariates with statistics from the fit data.
    drop_constant : bool
        Drop channel columns that are constant on the fit data (for example
        the peak of a rank-0 channel); such columns are aliased with the
        baseline function and make the model unidentifiable.
    """

    def __init__(self, model: FpcaModel, features=ESTIMATED_FEATURES, pca_within_group: bool = False,
                 group_pve: float = 0.9, standardize_baseline: bool = False, drop_constant: bool = True):
        unknown = set(features) - set(ALL_FEATURES)
        if unknown:
            raise ValueError(f"unknown feature names {sorted(unknown)}")
        self.model = model
        self.features = tuple(features)
        self.pca_within_group = pca_within_group
        self.group_pve = group_pve
        self.standardize_baseline = standardize_baseline
        self.drop_constant = drop_constant
        self._pca = {}
        self._keep = {}
        self._u_stats = None

    def _raw(self, patients):
        blocks, names, diag = [], [], {}
        for ch in self.model.channels:
            cols = channel_features(patients, ch)
            feats = DEGENERATE_FEATURES if ch.mean_density is None else self.features
            block = np.column_stack([cols[f] for f in feats]).astype(float)
            bad = np.argwhere(~np.isfinite(block))
            if bad.size:
                i, c = bad[0]
                raise ValueError(
                    f"non-finite feature {feats[c]!r} for patient {patients[i].id} on channel {ch.channel}"
                )
            blocks.append(block)
            names.append([f"ch{ch.channel}_{f}" for f in feats])
            diag[ch.channel] = {
                "degenerate": ch.degenerate,
                "ratio_clamped": int(np.sum(cols["ratio_clamped"])),
                "monotone": int(np.sum(cols["monotone_flag"])),
            }
        return blocks, names, diag

    def fit(self, patients) -> "FeatureBuilder":
        patients = list(patients)
        blocks, _, _ = self._raw(patients)
        for k, block in enumerate(blocks):
            if self.drop_constant and block.shape[0] > 1:
                spread = block.max(axis=0) - block.min(axis=0)
                self._keep[k] = np.flatnonzero(spread > 1e-12 * (1.0 + np.abs(block).max(axis=0)))
            else:
                self._keep[k] = np.arange(block.shape[1])
            blocks[k] = block[:, self._keep[k]]
        if self.pca_within_group:
            for k, block in enumerate(blocks):
                centre = block.mean(axis=0)
                _, s, vt = np.linalg.svd(block - centre, full_matrices=False)
                var = s**2
                if var.sum() <= 0:
                    keep = 0
                else:
                    share = np.cumsum(var) / var.sum()
                    keep = int(np.searchsorted(share, self.group_pve - 1e-12) + 1)
                    keep = min(keep, int(np.sum(s > s[0] * 1e-10)))
                self._pca[k] = (centre, vt[:keep].T)
        U = np.array([p.baseline for p in patients]).reshape(len(patients), -1)
        if self.standardize_baseline and U.shape[1]:
            sd = U.std(axis=0)
            self._u_stats = (U.mean(axis=0), np.where(sd > 0, sd, 1.0))
        return self

    def transform(self, patients) -> FeatureMatrix:
        patients = list(patients)
        blocks, names, diag = self._raw(patients)
        U = np.array([p.baseline for p in patients], dtype=float).reshape(len(patients), -1)
        if self._u_stats is not None:
            U = (U - self._u_stats[0]) / self._u_stats[1]
        cols = [U]
        columns = [f"u_{k + 1}" for k in range(U.shape[1])]
        groups = [[k] for k in range(U.shape[1])]
        group_names = [f"u_{k + 1}" for k in range(U.shape[1])]
        pos = U.shape[1]
        for k, (block, nm) in enumerate(zip(blocks, names)):
            keep = self._keep.get(k, np.arange(block.shape[1]))
            block = block[:, keep]
            nm = [nm[c] for c in keep]
            if self.pca_within_group:
                centre, load = self._pca[k]
                block = (block - centre) @ load
                nm = [f"ch{self.model.channels[k].channel}_pc{i + 1}" for i in range(block.shape[1])]
            if block.shape[1] == 0:
                continue
            cols.append(block)
            columns.extend(nm)
            groups.append(list(range(pos, pos + block.shape[1])))
            group_names.append(f"channel_{self.model.channels[k].channel}")
            pos += block.shape[1]
        Z = np.hstack(cols) if cols else np.zeros((len(patients), 0))
        return FeatureMatrix([p.id for p in patients], Z, columns, groups, group_names,
                             {"channels": diag, "standardize_baseline": self.standardize_baseline,
                              "dropped_constant": {self.model.channels[k].channel: int(blocks[k].shape[1] - v.size)
                                                   for k, v in self._keep.items() if blocks[k].shape[1] > v.size},
                              "pca_within_group": self.pca_within_group})


def build_feature_matrix(
    cohort: CohortData,
    model: FpcaModel,
    features=ESTIMATED_FEATURES,
    pca_within_group: bool = False,
    group_pve: float = 0.9,
    standardize_baseline: bool = False,
    drop_constant: bool = True,
) -> FeatureMatrix:
    """Feature matrix for every patient in ``cohort`` (labeled first)."""
    builder = FeatureBuilder(model, features, pca_within_group, group_pve, standardize_baseline, drop_constant)
    patients = list(cohort.patients)
    return builder.fit(patients).transform(patients)
