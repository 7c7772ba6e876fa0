"""SGD training of synergy networks on synthetic data, plus the ablation grid."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import textconfig
from .metrics import BIN_NAMES, batch_nme, binned_nme, euler_mae
from .morphable import FaceBasis, decompose_pose, rotation_to_euler
from .synergy.config import L2M_TARGETS, MAFA_ATTRIBUTES, MODES, NetConfig
from .synergy.model import SynergyNet
from .synthdata import SynthDataset
from .tensorcore.checkpoint import load_checkpoint, save_checkpoint
from .tensorcore.optim import SGD
from .tensorcore.tensor import Tensor

log = logging.getLogger(__name__)

LOSS_NAMES = ("l3dmm", "lmk", "l3dmm_lmk", "consistency")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 128
    lr: float = 0.002
    momentum: float = 0.9
    decay_fractions: tuple = (0.6, 0.8)
    decay_factors: tuple = (0.1, 0.01)
    seed: int = 0
    mode: str = "full"
    checkpoint_every: int = 0
    jobs: int = 1

    def __post_init__(self):
        f = self.decay_fractions
        if len(f) != len(self.decay_factors) or not all(0 < a < 1 for a in f) or list(f) != sorted(f):
            raise ValueError("decay_fractions must be ordered, inside (0, 1), one per decay factor")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm needs batch statistics)")
        if self.epochs < 1 or self.jobs < 1:
            raise ValueError("epochs and jobs must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    def lr_at(self, epoch: int) -> float:
        factor = 1.0
        for frac, fac in zip(self.decay_fractions, self.decay_factors):
            if epoch >= frac * self.epochs:
                factor = fac
        return self.lr * factor


@dataclass
class TrainResult:
    model: SynergyNet
    log: list = field(default_factory=list)
    best_epoch: int = -1
    checkpoint: Path | None = None


def param_stats(params):
    params = np.asarray(params, dtype=np.float64)
    return params.mean(axis=0), params.std(axis=0)


def fresh_observations(ds: SynthDataset, noise_frac: float, rng) -> np.ndarray:
    """Re-noise the stored projections; visibility is kept from the dataset."""
    n, n_l = len(ds), ds.n_landmarks
    xy = ds.landmarks[:, :2].transpose(0, 2, 1).astype(np.float64)
    sigma = noise_frac * ds.bbox.astype(np.float64)
    xy = xy + rng.standard_normal(xy.shape) * sigma[:, None, None]
    vis = ds.visible
    obs = np.concatenate([xy, np.ones((n, n_l, 1))], axis=2)
    obs[~vis] = 0.0
    return obs.reshape(n, -1)


def predict_dataset(model: SynergyNet, ds: SynthDataset):
    params, refined, _ = model.predict(ds.observations)
    euler = np.array([_euler_or_nan(p[:12]) for p in params])
    return params, refined, euler


def _euler_or_nan(pose):
    try:
        return rotation_to_euler(decompose_pose(pose).rotation)
    except ValueError:
        return (np.nan, np.nan, np.nan)


def evaluate(model: SynergyNet, ds: SynthDataset) -> dict:
    """Held-out alignment NME (yaw-binned) and Euler MAE."""
    _, refined, euler = predict_dataset(model, ds)
    per = batch_nme(refined, ds.landmarks, ds.bbox)
    align = binned_nme(per, ds.euler[:, 0])
    orient = euler_mae(np.nan_to_num(euler, nan=180.0), ds.euler)
    return {
        "nme": align.overall_pooled,
        "nme_bins": align.per_bin,
        "nme_binmean": align.overall_binmean,
        "mae": orient.mean,
        "mae_angles": [orient.yaw, orient.pitch, orient.roll],
        "n_excluded": orient.n_excluded,
    }


def _batch_grads(model, obs, alpha_gt, lmk_gt):
    out = model.forward(Tensor(obs))
    comps, total = model.losses(out, alpha_gt, lmk_gt)
    total.backward()
    return {k: float(v.data) for k, v in comps.items()}, float(total.data)


def train(dataset: SynthDataset, basis: FaceBasis, net_config: NetConfig, train_config: TrainConfig,
          out_dir=None, eval_dataset: SynthDataset | None = None) -> TrainResult:
    """Train one network; deterministic for a given seed with ``jobs == 1``.

    The dataset's own split supplies the validation set used for the best
    checkpoint unless ``eval_dataset`` is given.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    cfg = net_config.with_mode(train_config.mode) if train_config.mode else net_config
    if len(dataset) > 1:
        train_ds, val_ds = dataset.split()
    else:
        train_ds, val_ds = dataset, dataset
    if eval_dataset is not None:
        val_ds = eval_dataset
    if len(train_ds) < 2:
        raise ValueError("need at least two training samples")

    model = SynergyNet(cfg, basis, seed=train_config.seed)
    mean, std = param_stats(train_ds.params)
    model.set_param_stats(mean, std)
    model.set_input_stats(train_ds.observations, train_ds.landmarks)
    alpha_gt_all = model.whiten(train_ds.params).astype(np.float32)
    lmk_gt_all = train_ds.landmarks.transpose(0, 2, 1).astype(np.float32)

    opt = SGD(list(model.named_parameters()), lr=train_config.lr, momentum=train_config.momentum)
    bs = min(train_config.batch_size, len(train_ds))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "net.cfg").write_text(textconfig.dump(cfg))
        (out_dir / "train.cfg").write_text(textconfig.dump(train_config))
        log_file = open(out_dir / "train_log.jsonl", "w")
    else:
        log_file = None

    shards = _Shards(model, train_config.jobs) if train_config.jobs > 1 else None
    records, best, best_state, best_epoch = [], np.inf, None, -1
    try:
        for epoch in range(train_config.epochs):
            lr = train_config.lr_at(epoch)
            opt.lr = lr
            model.train()
            rng = np.random.default_rng([train_config.seed, epoch])
            obs_all = fresh_observations(train_ds, cfg.noise_frac, rng).astype(np.float32)
            order = rng.permutation(len(train_ds))
            sums = dict.fromkeys(LOSS_NAMES, 0.0)
            sums["total"] = 0.0
            n_batches = 0
            for bi, start in enumerate(range(0, len(order), bs)):
                idx = order[start:start + bs]
                if len(idx) < 2:
                    continue
                opt.zero_grad()
                if shards is None:
                    comps, total = _batch_grads(model, obs_all[idx], alpha_gt_all[idx], lmk_gt_all[idx])
                else:
                    comps, total = shards.run(obs_all[idx], alpha_gt_all[idx], lmk_gt_all[idx])
                if not np.isfinite(total):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}: {comps}")
                try:
                    opt.step()
                except FloatingPointError as exc:
                    raise TrainingError(f"epoch {epoch}, batch {bi}: {exc}") from exc
                for k, v in comps.items():
                    sums[k] += v
                sums["total"] += total
                n_batches += 1
            metrics = evaluate(model, val_ds)
            rec = {
                "epoch": epoch,
                "lr": lr,
                "loss": {k: v / max(n_batches, 1) for k, v in sums.items()},
                "val_nme": metrics["nme"],
                "val_mae": metrics["mae"],
            }
            records.append(rec)
            log.info("epoch %d lr %.4g loss %.4f val nme %.5f mae %.3f", epoch, lr,
                     rec["loss"]["total"], rec["val_nme"], rec["val_mae"])
            if log_file is not None:
                log_file.write(json.dumps(rec, sort_keys=True) + "\n")
                log_file.flush()
            if metrics["nme"] < best:
                best, best_epoch = metrics["nme"], epoch
                best_state = {k: np.array(v, copy=True) for k, v in model.state_dict().items()}
                best_opt = {k: np.array(v, copy=True) for k, v in opt.state_dict().items()}
            if out_dir is not None and train_config.checkpoint_every and (epoch + 1) % train_config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"epoch{epoch + 1:03d}.ckpt", model.state_dict(), opt.state_dict())
    finally:
        if log_file is not None:
            log_file.close()
        if shards is not None:
            shards.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "model.ckpt"
        save_checkpoint(ckpt, model.state_dict(), best_opt if best_state is not None else opt.state_dict())
    return TrainResult(model, records, best_epoch, ckpt)


class _Shards:
    """Data-parallel gradients: each worker owns a model replica; reduction is in shard order."""

    def __init__(self, model, jobs):
        self.model = model
        self.replicas = [copy.deepcopy(model) for _ in range(jobs)]
        self.pool = ThreadPoolExecutor(max_workers=jobs)

    def run(self, obs, alpha_gt, lmk_gt):
        parts = np.array_split(np.arange(len(obs)), len(self.replicas))
        params = dict(self.model.named_parameters())
        for rep in self.replicas:
            for name, p in rep.named_parameters():
                p.data[...] = params[name].data
                p.grad = None
            rep.train(self.model.training)

        def work(k):
            idx = parts[k]
            if len(idx) < 2:
                return None
            return _batch_grads(self.replicas[k], obs[idx], alpha_gt[idx], lmk_gt[idx])

        results = list(self.pool.map(work, range(len(self.replicas))))
        comps, total, weight = {}, 0.0, 0
        for k, res in enumerate(results):
            if res is None:
                continue
            w = len(parts[k])
            c, t = res
            for name, v in c.items():
                comps[name] = comps.get(name, 0.0) + v * w
            total += t * w
            weight += w
        # losses are batch means, so shard gradients combine with size weights
        for name, p in params.items():
            g = None
            for k, rep in enumerate(self.replicas):
                if results[k] is None:
                    continue
                rg = dict(rep.named_parameters())[name].grad
                if rg is None:
                    continue
                term = rg * (len(parts[k]) / weight)
                g = term if g is None else g + term
            p.grad = g
        bufs = dict(self.model.named_buffers())
        for name, b in bufs.items():
            if name.startswith("param_"):
                continue
            vals = [dict(rep.named_buffers())[name] for k, rep in enumerate(self.replicas) if results[k] is not None]
            b[...] = np.mean(vals, axis=0)
        return {k: v / weight for k, v in comps.items()}, total / weight

    def close(self):
        self.pool.shutdown()


def save_model(model: SynergyNet, path, optimizer_state=None):
    save_checkpoint(path, model.state_dict(), optimizer_state)
    Path(path).with_suffix(".cfg").write_text(textconfig.dump(model.cfg))


def load_model(path, basis: FaceBasis | None = None, net_config: NetConfig | None = None) -> SynergyNet:
    """Rebuild a network from a checkpoint; the config comes from ``net_config`` or a sibling file."""
    path = Path(path)
    if net_config is None:
        for cand in (path.with_suffix(".cfg"), path.parent / "net.cfg"):
            if cand.exists():
                net_config = textconfig.load(NetConfig, cand)
                break
        else:
            raise FileNotFoundError(f"no network config next to {path}")
    tensors, _ = load_checkpoint(path)
    model = SynergyNet(net_config, basis)
    model.load_state_dict(tensors)
    model.eval()
    return model


@dataclass(frozen=True)
class GridRow:
    name: str
    metrics: dict

    def as_dict(self):
        return {"config": self.name, **self.metrics}


def table_configs(net_config: NetConfig, kind: str = "modes"):
    """Named config variants: the four module toggles, MAFA attribute sets, or L->3DMM targets."""
    if kind == "modes":
        return [(m, net_config.with_mode(m)) for m in MODES]
    if kind == "attributes":
        return [(f"mafa:{a}", dataclasses.replace(net_config.with_mode("mafa"), mafa_attributes=a))
                for a in MAFA_ATTRIBUTES]
    if kind == "targets":
        return [(f"l2m:{t}", dataclasses.replace(net_config.with_mode("full"), l2m_targets=t))
                for t in L2M_TARGETS]
    raise ValueError(f"unknown grid kind {kind!r}")


def run_ablation_grid(dataset: SynthDataset, basis: FaceBasis, configs, train_config: TrainConfig,
                      eval_dataset: SynthDataset | None = None, out_dir=None) -> list[GridRow]:
    """Train each (name, NetConfig) under the same seed; rows keep the given order.

    Without ``eval_dataset`` the dataset's own split is used: the first part
    is trained on (with its own validation split) and the rest is the test set.
    """
    if eval_dataset is None:
        dataset, eval_dataset = dataset.split()
    tc = dataclasses.replace(train_config, mode="")
    rows = []
    for name, net_cfg in configs:
        sub = Path(out_dir) / name.replace(":", "_").replace("+", "_") if out_dir is not None else None
        result = train(dataset, basis, net_cfg, tc, out_dir=sub)
        metrics = evaluate(result.model, eval_dataset)
        if sub is not None:
            (sub / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        rows.append(GridRow(name, metrics))
    return rows


def format_grid(rows) -> str:
    head = ["config"] + list(BIN_NAMES) + ["All", "yaw", "pitch", "roll", "MAE"]
    lines = [" | ".join(f"{h:>10}" for h in head)]
    for row in rows:
        m = row.metrics
        cells = [row.name] + [
            "-" if m["nme_bins"][b] is None else f"{100 * m['nme_bins'][b]:.3f}" for b in BIN_NAMES
        ] + [f"{100 * m['nme']:.3f}"] + [f"{a:.3f}" for a in m["mae_angles"]] + [f"{m['mae']:.3f}"]
        lines.append(" | ".join(f"{c:>10}" for c in cells))
    return "\n".join(lines)
