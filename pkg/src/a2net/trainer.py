"""Asymmetric (query-from-database) training loop.

Each epoch: binarize every database item into constant codes Z, draw a
query set from the database, then run ``iterations`` mini-batch SGD steps
on batches of that query set against the whole database. With
``z_refresh = r > 0`` the database codes are also recomputed every ``r``
iterations inside the epoch.
"""

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .metrics import similarity_matrix
from .model import A2Net, ModelConfig, binarize

log = logging.getLogger(__name__)

CSV_COLUMNS = ("iteration", "epoch", "lr") + obj.TERM_NAMES + ("total",)

# which loss terms each named configuration trains with
TERM_SETS = {
    "hash_only": ("hash",),
    "basic": ("feat_x", "feat_v", "decor", "hash"),
    "plus_plus": obj.TERM_NAMES,
}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 40
    iterations: int = 50  # T_max: mini-batch iterations per epoch
    lr: float = 3e-7  # losses are sums over the whole database, so steps stay small
    lr_drop_iteration: int = 0  # global iteration at which lr /= 10; 0 disables
    batch_size: int = 16
    samples_per_epoch: int = 2000
    weight_decay: float = 1e-4
    momentum: float = 0.0
    seed: int = 0
    variant: str = "plus_plus"
    terms: tuple = None  # None -> every term of the variant
    lam: float = None
    alpha: float = None
    beta: float = None
    eta: float = None
    mnist_cifar: bool = False
    db_subsample: int = 0  # 0 -> whole database in every hash loss
    multi_label: bool = False
    z_refresh: int = 1  # iterations between database-code refreshes; 0 -> once per epoch
    data_init: bool = True  # standardise encoder layers on database images before training
    init_samples: int = 256

    def __post_init__(self):
        if self.terms is None:
            self.terms = TERM_SETS[self.variant]
        self.terms = tuple(self.terms)
        unknown = set(self.terms) - set(obj.TERM_NAMES)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        if self.batch_size < 1 or self.iterations < 0 or self.epochs < 0:
            raise ValueError("batch_size must be positive; epochs and iterations non-negative")
        if self.z_refresh < 0 or self.lr <= 0:
            raise ValueError("z_refresh must be non-negative and lr positive")

    def weights(self, k):
        w = obj.LossWeights.defaults(self.batch_size, k, self.mnist_cifar)
        for name in ("lam", "alpha", "beta", "eta"):
            if getattr(self, name) is not None:
                setattr(w, name, float(getattr(self, name)))
        return w


@dataclass
class TrainResult:
    model: A2Net
    history: list = field(default_factory=list)
    checkpoint: Path = None


def sample_query_set(database_ids, n, seed):
    """``n`` distinct ids drawn uniformly without replacement."""
    database_ids = np.asarray(database_ids)
    if n > len(database_ids):
        raise ValueError(f"cannot sample {n} queries from {len(database_ids)} database items")
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    return database_ids[rng.choice(len(database_ids), size=n, replace=False)]


def build_similarity(labels_q, labels_db, multi_label=False):
    return similarity_matrix(labels_q, labels_db, multi_label)


def update_database_codes(model, images, batch_size=64):
    """Z = sgn(tanh(W F(I))) for every database image."""
    return model.encode(images, batch_size)


def compute_terms(model, images, Z, S, terms, k):
    """Forward a batch and build the requested loss terms."""
    needs_decode = any(t in terms for t in ("img_g", "img_gp"))
    fw = model.forward(images, decode=needs_decode)
    out = {}
    if "feat_x" in terms or "feat_v" in terms:
        recon, constraint = obj.feature_recon_terms(fw.X, fw.Vp, model.params["W"])
        if "feat_x" in terms:
            out["feat_x"] = recon
        if "feat_v" in terms:
            out["feat_v"] = constraint
    if "decor" in terms:
        out["decor"] = obj.decorrelation_loss(fw.Vp)
    if "hash" in terms:
        out["hash"] = obj.hash_similarity_loss(fw.Vp, Z, S, k)
    if needs_decode:
        target = ad.Tensor(images)
        g, gp = obj.image_recon_terms(target, fw.I_g if "img_g" in terms else None,
                                      fw.I_gp if "img_gp" in terms else None)
        if g is not None:
            out["img_g"] = g
        if gp is not None:
            out["img_gp"] = gp
    return out


def _labels(ds, ids, multi_label):
    if multi_label:
        return [ds.attributes[i] for i in ids]
    return ds.labels[ids]


def write_history(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for row in history:
            w.writerow([row["iteration"], row["epoch"]] + [
                "" if row.get(c) is None else f"{row[c]:.6f}" for c in CSV_COLUMNS[2:]])


def train(config, dataset, model_config=None, out_dir=None, model=None, db_ids=None, on_epoch=None):
    """Train on the database split of ``dataset``; returns model and per-iteration history."""
    if db_ids is None:
        db_ids = dataset.indices("database", "train")
    db_ids = np.asarray(db_ids, dtype=np.int64)
    if len(db_ids) == 0:
        raise TrainingError("dataset has no database/train items to learn from")
    if model is None:
        if model_config is None:
            model_config = ModelConfig(image_shape=dataset.image_shape, seed=config.seed,
                                       variant="plus_plus" if config.variant == "plus_plus" else "basic")
        model = A2Net(model_config)
        if config.data_init:
            pick = np.random.default_rng(config.seed).permutation(len(db_ids))[:config.init_samples]
            model.data_init(dataset.batch(db_ids[np.sort(pick)]))
    k = model.config.k
    has_image = any(t in config.terms for t in obj.IMAGE_TERMS)
    if has_image and model.config.variant != "plus_plus":
        raise TrainingError("image reconstruction terms need a plus_plus model")
    variant = "plus_plus" if has_image else "basic"
    weights = config.weights(k)
    db_images = dataset.batch(db_ids)
    db_labels = _labels(dataset, db_ids, config.multi_label)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    seeds = np.random.SeedSequence(config.seed)
    lr = config.lr
    history = []
    it = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt = out_dir / "model.a2ck" if out_dir is not None else None

    for epoch in range(config.epochs):
        epoch_seed, sub_seed = seeds.spawn(2)
        seeds = sub_seed
        Z = update_database_codes(model, db_images).astype(np.float64)
        n_query = min(config.samples_per_epoch, len(db_ids))
        omega = sample_query_set(np.arange(len(db_ids)), n_query, epoch_seed.generate_state(1)[0])
        rng = np.random.default_rng(epoch_seed.generate_state(2)[1])
        for t in range(config.iterations):
            if t and config.z_refresh and t % config.z_refresh == 0:
                Z = update_database_codes(model, db_images).astype(np.float64)
            if config.lr_drop_iteration and it == config.lr_drop_iteration:
                lr = lr / 10.0
            start = (t * config.batch_size) % max(1, len(omega))
            rows = np.take(omega, np.arange(start, start + config.batch_size), mode="wrap")
            if config.db_subsample and config.db_subsample < len(db_ids):
                cols = np.sort(rng.choice(len(db_ids), size=config.db_subsample, replace=False))
            else:
                cols = slice(None)
            q_labels = _labels(dataset, db_ids[rows], config.multi_label)
            d_labels = db_labels[cols] if not config.multi_label else [db_labels[c] for c in np.arange(len(db_ids))[cols]]
            S = build_similarity(q_labels, d_labels, config.multi_label)
            terms = compute_terms(model, db_images[rows], Z[cols], S, config.terms, k)
            loss = obj.total_loss(terms, weights, variant)
            value = loss.item()
            row = {"iteration": it, "epoch": epoch, "lr": lr, "total": value}
            row.update({name: t.item() for name, t in terms.items()})
            if not np.isfinite(value):
                if ckpt is not None:
                    model.save(ckpt)
                    write_history(history, out_dir / "loss.csv")
                raise TrainingError(f"non-finite loss at iteration {it}; last good state kept at {ckpt}")
            model.zero_grad()
            ad.backward(loss)
            if not all(np.all(np.isfinite(p.grad)) for p in params if p.grad is not None):
                if ckpt is not None:
                    model.save(ckpt)
                    write_history(history, out_dir / "loss.csv")
                raise TrainingError(f"non-finite gradient at iteration {it}; last good state kept at {ckpt}")
            if config.momentum:
                for p, v in zip(params, velocity):
                    if p.grad is not None:
                        v *= config.momentum
                        v += p.grad + config.weight_decay * p.data
                        p.grad = v.copy()
                ad.sgd_step(params, lr, 0.0)
            else:
                ad.sgd_step(params, lr, config.weight_decay)
            history.append(row)
            it += 1
        if history:
            log.info("epoch %d  total %.4f", epoch, history[-1]["total"])
        if on_epoch is not None:
            on_epoch(epoch, model)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        model.save(ckpt)
        write_history(history, out_dir / "loss.csv")
    return TrainResult(model=model, history=history, checkpoint=ckpt)


def config_dict(config):
    return asdict(config)
