"""Loss terms of the hashing objective and their weighted combination.

All losses are plain sums over the batch (squared Frobenius norms), never
means. Matrices are batch-major: X is (n, d), V' is (n, k), so the
decorrelation Gram matrix is V'^T V' (k x k).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

TERM_NAMES = ("feat_x", "feat_v", "decor", "hash", "img_g", "img_gp")
IMAGE_TERMS = ("img_g", "img_gp")


@dataclass
class LossWeights:
    lam: float = 1.0
    alpha: float = 0.0
    beta: float = 0.0
    eta: float = 0.1

    @classmethod
    def defaults(cls, n, k, mnist_cifar=False):
        """lambda = 1, alpha = 1/(n k), beta = 12/k, eta = 0.5 on concat data else 0.1."""
        if n < 1 or k < 1:
            raise ValueError("n and k must be positive")
        return cls(lam=1.0, alpha=1.0 / (n * k), beta=12.0 / k, eta=0.5 if mnist_cifar else 0.1)

    def __post_init__(self):
        for name in ("lam", "alpha", "beta", "eta"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def _check_same(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ad.ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def feature_recon_terms(X, Vp, W):
    """(||X - V' W||^2, ||X W^T - V'||^2), i.e. decoder error and encoder-constraint error."""
    if X.shape[1] != W.shape[1] or Vp.shape[1] != W.shape[0] or X.shape[0] != Vp.shape[0]:
        raise ad.ShapeError(f"feature_recon: X {X.shape}, V' {Vp.shape}, W {W.shape} are inconsistent")
    decoded = ad.matmul(Vp, W)
    recon = ad.frobenius_sq(ad.add(X, ad.scale(decoded, -1.0)))
    encoded = ad.matmul(X, W, trans_b=True)
    constraint = ad.frobenius_sq(ad.add(encoded, ad.scale(Vp, -1.0)))
    return recon, constraint


def feature_recon_loss(X, Vp, W, lam=1.0):
    recon, constraint = feature_recon_terms(X, Vp, W)
    return ad.add(recon, ad.scale(constraint, lam))


def decorrelation_loss(Vp, n=None):
    """||V'^T V' - n I||^2 with V' of shape (n, k)."""
    n = Vp.shape[0] if n is None else n
    k = Vp.shape[1]
    gram = ad.matmul(Vp, Vp, trans_a=True)
    return ad.frobenius_sq(ad.add(gram, ad.Tensor(-float(n) * np.eye(k))))


def hash_similarity_loss(Q, Z, S, k=None):
    """sum_ij (q_i^T z_j - k S_ij)^2; ``Z`` and ``S`` are constants."""
    Z = np.asarray(Z.data if isinstance(Z, ad.Tensor) else Z, dtype=np.float64)
    S = np.asarray(S.data if isinstance(S, ad.Tensor) else S, dtype=np.float64)
    k = Q.shape[1] if k is None else k
    if Z.ndim != 2 or Z.shape[1] != Q.shape[1]:
        raise ad.ShapeError(f"hash loss: query codes {Q.shape} vs database codes {Z.shape}")
    if S.shape != (Q.shape[0], Z.shape[0]):
        raise ad.ShapeError(f"hash loss: similarity {S.shape} != ({Q.shape[0]}, {Z.shape[0]})")
    inner = ad.matmul(Q, ad.Tensor(Z), trans_b=True)
    return ad.frobenius_sq(ad.add(inner, ad.Tensor(-float(k) * S)))


def image_recon_terms(I, I_g=None, I_gp=None):
    """Per-branch ||I^g - I||^2 and ||I^g' - I||^2 (None for a disabled branch)."""
    if I_g is None and I_gp is None:
        raise ValueError("image reconstruction needs at least one branch")
    I = I if isinstance(I, ad.Tensor) else ad.Tensor(I)
    out = []
    for rec in (I_g, I_gp):
        if rec is None:
            out.append(None)
            continue
        _check_same(rec, I, "image_recon")
        out.append(ad.frobenius_sq(ad.add(rec, ad.scale(I, -1.0))))
    return tuple(out)


def image_recon_loss(I, I_g=None, I_gp=None):
    terms = [t for t in image_recon_terms(I, I_g, I_gp) if t is not None]
    return terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])


def total_loss(terms, weights, variant="plus_plus"):
    """Weighted sum of whichever terms are present.

    ``terms`` maps names from TERM_NAMES to scalar tensors. Absent terms are
    ablated. ``basic`` rejects image terms; ``plus_plus`` needs at least one.
    """
    unknown = set(terms) - set(TERM_NAMES)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    has_image = any(terms.get(t) is not None for t in IMAGE_TERMS)
    if variant == "basic" and has_image:
        raise ValueError("basic variant takes no image reconstruction terms")
    if variant == "plus_plus" and not has_image:
        raise ValueError("plus_plus variant needs an image reconstruction term")
    if variant not in ("basic", "plus_plus"):
        raise ValueError(f"unknown variant {variant!r}")
    coef = {"feat_x": 1.0, "feat_v": weights.lam, "decor": weights.alpha, "hash": weights.beta,
            "img_g": weights.eta, "img_gp": weights.eta}
    total = None
    for name in TERM_NAMES:
        t = terms.get(name)
        if t is None:
            continue
        if t.data.size != 1:
            raise ad.ShapeError(f"loss term {name} is not scalar")
        piece = t if coef[name] == 1.0 else ad.scale(t, coef[name])
        total = piece if total is None else ad.add(total, piece)
    if total is None:
        raise ValueError("no loss terms given")
    return total
