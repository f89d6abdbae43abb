"""Experiment drivers: gradient checks, toy retrieval runs, ablation, simplicity bias.

These are the routines behind the ``gradcheck`` and ``sbexp`` subcommands
and the acceptance suite. Every driver is deterministic given its seed.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dataset as dk
from . import objectives as obj
from .metrics import retrieval_map
from .model import A2Net, ModelConfig
from .trainer import TrainConfig, train

# loss-term name -> objective term names it covers
GRADCHECK_TERMS = {
    "feature_recon": ("feat_x", "feat_v"),
    "decorrelation": ("decor",),
    "hash": ("hash",),
    "image_recon": ("img_g", "img_gp"),
}

ABLATION_STEPS = (
    ("hash", ("hash",)),
    ("+feature_recon", ("hash", "feat_x", "feat_v")),
    ("+image_recon", ("hash", "feat_x", "feat_v", "img_g", "img_gp")),
    ("+decorrelation", obj.TERM_NAMES),
)

SB_VARIANTS = {
    "baseline": ("hash",),
    "a2net": ("feat_x", "feat_v", "decor", "hash"),
    "a2net++": obj.TERM_NAMES,
}


def micro_model_config(seed=0):
    """Smallest model that still exercises every layer type."""
    return ModelConfig(k=4, image_shape=(1, 4, 4), backbone_channels=[2], local_dim=2, global_dim=2,
                       d_prime=3, transform_depth=2, seed=seed)


def gradcheck(terms=None, seed=0, n=2, eps=1e-5):
    """Finite-difference check of each loss term and the weighted composite.

    Returns ``{name: GradCheckResult}`` over all model parameters, on ``n``
    random images through a micro model.
    """
    names = list(GRADCHECK_TERMS) + ["composite"] if terms is None else list(terms)
    bad = set(names) - set(GRADCHECK_TERMS) - {"composite"}
    if bad:
        raise ValueError(f"unknown gradcheck terms {sorted(bad)}")
    cfg = micro_model_config(seed)
    model = A2Net(cfg)
    rng = np.random.default_rng(seed)
    images = rng.random((n,) + cfg.image_shape)
    model.data_init(images)
    Z = np.where(rng.random((3 * n, cfg.k)) < 0.5, -1.0, 1.0)
    S = np.where(rng.random((n, 3 * n)) < 0.5, -1.0, 1.0)
    weights = obj.LossWeights.defaults(n, cfg.k)

    def build(wanted):
        fw = model.forward(images)
        recon, cons = obj.feature_recon_terms(fw.X, fw.Vp, model.params["W"])
        g, gp = obj.image_recon_terms(ad.Tensor(images), fw.I_g, fw.I_gp)
        all_terms = {"feat_x": recon, "feat_v": cons, "decor": obj.decorrelation_loss(fw.Vp),
                     "hash": obj.hash_similarity_loss(fw.Vp, Z, S), "img_g": g, "img_gp": gp}
        if wanted is None:
            return obj.total_loss(all_terms, weights)
        out = all_terms[wanted[0]]
        for name in wanted[1:]:
            out = ad.add(out, all_terms[name])
        return out

    results = {}
    for name in names:
        wanted = None if name == "composite" else GRADCHECK_TERMS[name]
        results[name] = ad.finite_diff_check(lambda p: build(wanted), model.parameters(), eps)
    return results


def toy_dataset(seed=0, classes=8, per_class=60, queries_per_class=10, difficulty=0.5):
    """The 8-class 3x16x16 retrieval set: 400 database and 80 query items by default."""
    return dk.make_synthetic(classes, per_class, (3, 16, 16), difficulty, seed=seed,
                             query_per_class=queries_per_class)


def eval_map(model, ds, query_view=None, db_view=None):
    """Hamming-ranking mAP of the query split against the database split."""
    q, d = ds.indices("query"), ds.indices("database")
    qv = ds if query_view is None else query_view
    dv = ds if db_view is None else db_view
    return retrieval_map(model.encode(qv.batch(q)), model.encode(dv.batch(d)), ds.labels[q], ds.labels[d])


@dataclass
class RunSummary:
    seed: int
    terms: tuple
    mAP: float
    seconds: float
    history: list


def toy_run(seed=0, terms=None, epochs=20, iterations=50, k=12, ds=None, **train_kw):
    """Train from scratch on the toy set and report query mAP."""
    import time

    ds = toy_dataset(seed) if ds is None else ds
    terms = obj.TERM_NAMES if terms is None else tuple(terms)
    has_image = any(t in terms for t in obj.IMAGE_TERMS)
    variant = "plus_plus" if has_image else "basic"
    cfg = TrainConfig(epochs=epochs, iterations=iterations, seed=seed, variant=variant, terms=terms, **train_kw)
    mcfg = ModelConfig(k=k, image_shape=ds.image_shape, seed=seed, variant=variant)
    t0 = time.perf_counter()
    res = train(cfg, ds, mcfg, db_ids=ds.indices("database"))
    secs = time.perf_counter() - t0
    return RunSummary(seed, terms, eval_map(res.model, ds), secs, res.history), res.model


def ablation(seeds=(0, 1, 2), epochs=20, iterations=50, k=12):
    """Mean mAP per ablation step; rows of (step, seed, mAP)."""
    rows = []
    for label, terms in ABLATION_STEPS:
        for seed in seeds:
            summary, _ = toy_run(seed, terms, epochs, iterations, k)
            rows.append((label, seed, summary.mAP))
    return rows


def concat_dataset(seed=0, classes=10, per_class=40, queries_per_class=10, difficulty=0.5):
    """Simple glyph (top) over a complex synthetic image (bottom), same class."""
    n = per_class + queries_per_class
    simple = dk.make_simple_shapes(classes, n, (1, 16, 16), seed=100 + seed, query_per_class=queries_per_class)
    cplx = dk.make_synthetic(classes, n, (3, 16, 16), difficulty, seed=200 + seed, query_per_class=queries_per_class)
    return dk.make_concat_dataset(dk.ConcatSpec(simple, cplx), seed=seed)


def simplicity_bias(seeds=(0,), k=12, epochs=10, iterations=50, variants=("baseline", "a2net++"),
                    out_dir=None, heatmaps=4, ds_kwargs=None, lr=None):
    """Train on intact concat images, test on combined / simple-only / complex-only views.

    Query and database items of a view are both masked. Returns rows of
    (variant, k, seed, view, mAP); with ``out_dir`` also writes activation
    heatmaps of the first ``heatmaps`` query images per variant and seed.
    """
    rows = []
    for seed in seeds:
        ds = concat_dataset(seed, **(ds_kwargs or {}))
        views = {"combined": ds, "simple_only": dk.mask_part(ds, "complex"),
                 "complex_only": dk.mask_part(ds, "simple")}
        for variant in variants:
            terms = SB_VARIANTS[variant]
            mvariant = "plus_plus" if variant == "a2net++" else "basic"
            cfg = TrainConfig(epochs=epochs, iterations=iterations, seed=seed, variant=mvariant, terms=terms,
                              mnist_cifar=True, **({} if lr is None else {"lr": lr}))
            mcfg = ModelConfig(k=k, image_shape=ds.image_shape, seed=seed, variant=mvariant)
            model = train(cfg, ds, mcfg, db_ids=ds.indices("database")).model
            for view, vds in views.items():
                rows.append((variant, k, seed, view, eval_map(model, ds, vds, vds)))
            if out_dir is not None:
                for q in ds.indices("query")[:heatmaps]:
                    dk.activation_heatmap(model, ds.image(q), Path(out_dir) / f"{variant}_k{k}_s{seed}_q{q}")
    return rows


def complex_energy(model, ds, ids):
    """Mean heatmap energy over the complex half for the given items."""
    hs = ds.meta["simple_height"]
    return float(np.mean([dk.region_energy(dk.activation_heatmap(model, ds.image(i)), slice(hs, None)) for i in ids]))
