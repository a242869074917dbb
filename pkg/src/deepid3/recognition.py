"""Multi-region feature ensembles, PCA and the Joint Bayesian face model."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ModelInvalidError, ShapeError
from .nets import NetworkGraph, extract_feature
from .tensor import as_tensor

# ---------------------------------------------------------------------------
# regions and ensembles


@dataclass(frozen=True)
class Region:
    """Crop rectangle on the face canvas, resampled by ``scale``."""

    name: str
    top: int
    left: int
    height: int
    width: int
    scale: float = 1.0

    @property
    def out_shape(self):
        return (int(round(self.height * self.scale)), int(round(self.width * self.scale)))

    def check(self, canvas_h, canvas_w):
        if self.top < 0 or self.left < 0 or self.height < 1 or self.width < 1 \
                or self.top + self.height > canvas_h or self.left + self.width > canvas_w:
            raise ShapeError(f"region '{self.name}' ({self.top},{self.left},{self.height}x{self.width}) "
                             f"falls outside the {canvas_h}x{canvas_w} canvas")
        if min(self.out_shape) < 1:
            raise ShapeError(f"region '{self.name}' scales to an empty image")


def _resample_matrix(n_in, n_out):
    """Linear-interpolation matrix on pixel centres, shape ``[n_out, n_in]``."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def crop_region(face, region: Region, flip: bool = False):
    """Crop, bilinearly resample and optionally mirror a ``[C, H, W]`` face."""
    face = as_tensor(face)
    region.check(face.shape[1], face.shape[2])
    crop = face[:, region.top:region.top + region.height, region.left:region.left + region.width]
    oh, ow = region.out_shape
    if (oh, ow) != (region.height, region.width):
        ry = _resample_matrix(region.height, oh)
        rx = _resample_matrix(region.width, ow)
        crop = np.einsum("oh,chw,pw->cop", ry, crop, rx)
    if flip:
        crop = crop[:, :, ::-1]
    return np.ascontiguousarray(crop)


@dataclass
class EnsembleEntry:
    region: Region
    net: NetworkGraph
    flip: bool = False

    @property
    def name(self):
        return f"{self.region.name}_{self.net.arch}{'_flip' if self.flip else ''}"


@dataclass
class EnsembleSpec:
    entries: list = field(default_factory=list)

    @property
    def feature_dim(self):
        return sum(e.net.cfg.feature_dim for e in self.entries)


def ensemble_extract(spec: EnsembleSpec, face) -> np.ndarray:
    """Concatenated features of every entry, in entry order."""
    feats = [extract_feature(e.net, crop_region(face, e.region, e.flip)) for e in spec.entries]
    return np.concatenate(feats) if feats else np.zeros(0)


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaModel:
    mean: np.ndarray  # [D]
    components: np.ndarray  # [p, D], orthonormal rows
    eigenvalues: np.ndarray  # [p], non-increasing


def pca_fit(features, p: int) -> PcaModel:
    """Top-``p`` principal directions of the sample covariance (``n-1`` normalised).

    Uses the ``n x n`` Gram matrix when there are fewer samples than
    dimensions. Each component's largest-magnitude entry is made positive.
    """
    x = as_tensor(np.asarray(features))
    if x.ndim != 2:
        raise ShapeError(f"pca_fit expects [n, D] features, got {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ShapeError("pca_fit needs at least 2 samples")
    if not 1 <= p <= min(d, n - 1):
        raise ShapeError(f"pca target dim {p} must be in [1, min(D={d}, n-1={n - 1})]")
    mean = x.mean(axis=0)
    xc = x - mean
    if n < d:
        vals, vecs = np.linalg.eigh(xc @ xc.T / (n - 1))
        order = np.argsort(vals)[::-1][:p]
        vals = np.clip(vals[order], 0.0, None)
        comps = (xc.T @ vecs[:, order]).T
        comps /= np.linalg.norm(comps, axis=1, keepdims=True)
    else:
        vals, vecs = np.linalg.eigh(xc.T @ xc / (n - 1))
        order = np.argsort(vals)[::-1][:p]
        vals = np.clip(vals[order], 0.0, None)
        comps = vecs[:, order].T
    pivot = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(p), pivot])[:, None]
    return PcaModel(mean, np.ascontiguousarray(comps), vals)


def pca_transform(model: PcaModel, x) -> np.ndarray:
    """Project ``x`` (a vector or rows of vectors) onto the components."""
    x = as_tensor(x)
    if x.shape[-1] != model.mean.size:
        raise ShapeError(f"pca_transform: input dim {x.shape[-1]} != model dim {model.mean.size}")
    return (x - model.mean) @ model.components.T


def pca_inverse(model: PcaModel, y) -> np.ndarray:
    return as_tensor(y) @ model.components + model.mean


# ---------------------------------------------------------------------------
# Joint Bayesian


@dataclass
class JointBayesianModel:
    """``x = mean + mu + eps`` with ``mu ~ N(0, s_mu)`` per identity and
    ``eps ~ N(0, s_eps)`` per image."""

    s_mu: np.ndarray
    s_eps: np.ndarray
    mean: np.ndarray | None = None

    def __post_init__(self):
        self.s_mu = as_tensor(self.s_mu)
        self.s_eps = as_tensor(self.s_eps)
        if self.s_mu.shape != self.s_eps.shape or self.s_mu.ndim != 2 or self.s_mu.shape[0] != self.s_mu.shape[1]:
            raise ModelInvalidError(f"covariances must be matching square matrices, got "
                                    f"{self.s_mu.shape} and {self.s_eps.shape}")
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        self.mean = as_tensor(self.mean)

    @property
    def dim(self):
        return self.s_mu.shape[0]

    @cached_property
    def _score_terms(self):
        p = self.dim
        total = self.s_mu + self.s_eps
        sigma_i = np.block([[total, self.s_mu], [self.s_mu, total]])
        try:
            chol_t = np.linalg.cholesky(total)
            chol_i = np.linalg.cholesky(sigma_i)
        except np.linalg.LinAlgError:
            raise ModelInvalidError("joint covariance is not positive definite") from None
        inv_t = np.linalg.inv(total)
        inv_i = np.linalg.inv(sigma_i)
        p11, p12 = inv_i[:p, :p], inv_i[:p, p:]
        a = inv_t - p11
        a = 0.5 * (a + a.T)
        g = 0.5 * (p12 + p12.T)
        logdet_e = 4.0 * np.log(np.diag(chol_t)).sum()
        logdet_i = 2.0 * np.log(np.diag(chol_i)).sum()
        return a, g, 0.5 * (logdet_e - logdet_i)

    def check(self):
        for name, m in (("s_mu", self.s_mu), ("s_eps", self.s_eps)):
            if not np.allclose(m, m.T, atol=1e-10, rtol=0):
                raise ModelInvalidError(f"{name} is not symmetric")
        if np.linalg.eigvalsh(self.s_eps).min() <= 0:
            raise ModelInvalidError("s_eps is not positive definite")
        if np.linalg.eigvalsh(self.s_mu).min() < -1e-10 * max(1.0, np.trace(self.s_mu)):
            raise ModelInvalidError("s_mu is not positive semi-definite")


def jb_score(model: JointBayesianModel, x1, x2) -> float:
    """Log-likelihood ratio of "same identity" over "different identities"."""
    x1 = as_tensor(x1).reshape(-1) - model.mean
    x2 = as_tensor(x2).reshape(-1) - model.mean
    if x1.size != model.dim or x2.size != model.dim:
        raise ShapeError(f"jb_score: inputs of dim {x1.size}, {x2.size} for a dim-{model.dim} model")
    a, g, c = model._score_terms
    # both orders of each term, so swapping x1 and x2 is bit-exact
    cross = 0.5 * ((x1 @ g) @ x2 + (x2 @ g) @ x1)
    return float(0.5 * (x1 @ a @ x1 + x2 @ a @ x2) - cross + c)


def jb_score_matrix(model: JointBayesianModel, xs, ys) -> np.ndarray:
    """Scores for every ``(xs[i], ys[j])`` combination."""
    xs = as_tensor(xs) - model.mean
    ys = as_tensor(ys) - model.mean
    a, g, c = model._score_terms
    qx = 0.5 * np.einsum("ij,jk,ik->i", xs, a, xs)
    qy = 0.5 * np.einsum("ij,jk,ik->i", ys, a, ys)
    cross = 0.5 * ((xs @ g) @ ys.T + ((ys @ g) @ xs.T).T)
    return qx[:, None] + qy[None, :] - cross + c


def _floor_eigenvalues(m, floor):
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if vals.min() >= floor:
        return 0.5 * (m + m.T)
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def _regularize(s_mu, s_eps):
    p = s_eps.shape[0]
    floor = 1e-6 * max(np.trace(s_eps) / p, 1e-12)
    return _floor_eigenvalues(s_mu, 0.0), _floor_eigenvalues(s_eps, floor)


def jb_fit(features, identities, iters: int = 20, on_iter=None) -> JointBayesianModel:
    """Fit the two covariances by expectation-maximisation.

    Initialised from between- and within-identity scatter. Each E-step takes
    the exact Gaussian posterior of every identity's latent ``mu`` (mean and
    covariance); the M-step sets both covariances to the expected second
    moments of ``mu`` and ``eps``, which never decreases the likelihood.
    ``on_iter(iteration, model)`` is called after initialisation
    (iteration 0) and after every M-step.
    """
    x = as_tensor(np.asarray(features))
    labels = np.asarray(identities)
    if x.ndim != 2 or len(x) != len(labels):
        raise ShapeError(f"jb_fit: {x.shape} features vs {len(labels)} labels")
    if iters < 1:
        raise ValueError("iters must be positive")
    uniq, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if len(uniq) < 2:
        raise ShapeError("jb_fit needs at least 2 identities")
    if counts.max() < 2:
        raise ShapeError("jb_fit needs an identity with at least 2 samples")
    n, p = x.shape
    mean = x.mean(axis=0)
    xc = x - mean
    k = len(uniq)
    sums = np.zeros((k, p))
    np.add.at(sums, inverse, xc)
    id_means = sums / counts[:, None]

    within = xc - id_means[inverse]
    s_mu = id_means.T @ id_means / k
    s_eps = within.T @ within / n
    s_mu, s_eps = _regularize(s_mu, s_eps)
    if on_iter is not None:
        on_iter(0, JointBayesianModel(s_mu, s_eps, mean))

    sizes = np.unique(counts)
    for it in range(1, iters + 1):
        e_mu = np.empty((k, p))
        cov_sum = np.zeros((p, p))  # sum over identities of posterior cov
        cov_img_sum = np.zeros((p, p))  # same, weighted by identity size
        for m in sizes:
            sel = counts == m
            prec = s_mu + s_eps / m
            gain = np.linalg.solve(prec, s_mu).T  # s_mu @ inv(prec)
            e_mu[sel] = id_means[sel] @ gain.T
            post_cov = s_mu - gain @ s_mu
            cov_sum += sel.sum() * post_cov
            cov_img_sum += sel.sum() * m * post_cov
        resid = xc - e_mu[inverse]
        s_mu = (e_mu.T @ e_mu + cov_sum) / k
        s_eps = (resid.T @ resid + cov_img_sum) / n
        s_mu, s_eps = _regularize(s_mu, s_eps)
        if on_iter is not None:
            on_iter(it, JointBayesianModel(s_mu, s_eps, mean))
    model = JointBayesianModel(s_mu, s_eps, mean)
    model.check()
    return model


def jb_log_likelihood(model: JointBayesianModel, features, identities) -> float:
    """Marginal log-likelihood of labelled data under the model.

    Uses the per-identity decomposition into the identity mean and the
    within-identity deviations.
    """
    x = as_tensor(np.asarray(features)) - model.mean
    labels = np.asarray(identities)
    p = model.dim
    total = 0.0
    inv_eps = np.linalg.inv(model.s_eps)
    _, logdet_eps = np.linalg.slogdet(model.s_eps)
    for u in np.unique(labels):
        xi = x[labels == u]
        m = len(xi)
        xbar = xi.mean(axis=0)
        dev = xi - xbar
        cov_bar = model.s_mu + model.s_eps / m
        _, logdet_bar = np.linalg.slogdet(cov_bar)
        quad = np.einsum("ij,jk,ik->", dev, inv_eps, dev) + xbar @ np.linalg.solve(cov_bar, xbar)
        # |I_m (x) S_eps + 11^T (x) S_mu| = |S_eps|^(m-1) |S_eps + m S_mu|
        logdet = (m - 1) * logdet_eps + logdet_bar + p * np.log(m)
        total += -0.5 * (m * p * np.log(2 * np.pi) + logdet + quad)
    return float(total)
