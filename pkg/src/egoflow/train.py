"""Training loop, evaluation and the ablation sweep."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import Pyramid, build_pyramid
from .config import Config, table3_row
from .data import ScenePair, augment_rotation, generate, load_pair, read_manifest, scene_config, subsample_shuffle
from .flow import ForwardOut, forward
from .layers import ParamStore
from .losses import total_loss
from .metrics import ego_metrics, flow_metrics, mask_metrics

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.egfk"
LOG_NAME = "train_log.csv"


def learning_rate(epoch: int, base: float = 0.001, decay: float = 0.7, every: int = 10) -> float:
    """Step decay: ``base * decay ** (epoch // every)``."""
    return base * decay ** (epoch // every)


@dataclass
class Sample:
    pair: ScenePair
    p_pyr: Pyramid
    q_pyr: Pyramid


def prepare(pair: ScenePair, n: int, seed: int, augment: bool = False, k: int = 16) -> Sample:
    """Sub-sample/shuffle to ``n`` points per frame, optionally rotate, build pyramids."""
    pair = subsample_shuffle(pair, n, seed)
    if augment:
        pair = augment_rotation(pair, seed + 1)
    return Sample(pair, build_pyramid(pair.P, k), build_pyramid(pair.Q, k))


def load_dataset(path) -> list[ScenePair]:
    if not path:
        raise FileNotFoundError("no dataset given")
    return [load_pair(p) for p in read_manifest(path)]


def synthetic_dataset(count: int, seed: int, scene: dict | None = None) -> list[ScenePair]:
    """``count`` generated pairs with seeds ``seed, seed + 1, ...``."""
    return [generate(scene_config(scene, seed=seed + i)) for i in range(count)]


def run_forward(store: ParamStore, sample: Sample, cfg: Config) -> ForwardOut:
    return forward(store, sample.pair.P, sample.pair.Q, cfg.model, sample.p_pyr, sample.q_pyr)


def train_step(store: ParamStore, sample: Sample, cfg: Config, lr: float) -> dict:
    store.training = True
    out = run_forward(store, sample, cfg)
    pair = sample.pair
    lt = total_loss(out, sample.q_pyr.points[0], pair.y_P, pair.y_Q, pair.R, pair.t,
                    cfg.loss, cfg.model.hybrid_warp)
    params = store.parameters()
    T.zero_grad(params)
    T.backward(lt.total)
    T.adam_step(params, lr)
    return lt.as_row()


# -- evaluation -----------------------------------------------------------

def _prefixed(prefix: str, m: dict) -> dict:
    return {f"{prefix}{k}": v for k, v in m.items() if k != "n"}


def predict(store: ParamStore, sample: Sample, cfg: Config) -> dict:
    """Final flow, binary FG mask of P and the level-0 ego-motion."""
    store.training = False
    out = run_forward(store, sample, cfg)
    store.training = True
    e0 = out.ego[0]
    return {"flow": out.final_flow.data.astype(np.float64), "fg": out.p_feats.seg.fg.astype(bool),
            "R": e0.R.data.astype(np.float64), "t": e0.t.data.astype(np.float64),
            "degenerate": e0.degenerate}


def oracle_prediction(sample: Sample) -> dict:
    pair = sample.pair
    return {"flow": pair.S.astype(np.float64), "fg": pair.y_P.astype(bool),
            "R": pair.R.astype(np.float64), "t": pair.t.astype(np.float64), "degenerate": False}


def evaluate(store: ParamStore | None, samples: list[Sample], cfg: Config,
             oracle: bool = False) -> tuple[list[dict], dict]:
    """Per-pair metric rows and a pooled aggregate.

    Flow metrics are pooled over all points of all pairs, overall and split
    into FG/BG by the ground-truth labels; ego and mask metrics are averaged
    or pooled respectively. ``oracle`` injects the ground truth as prediction.
    """
    rows = []
    preds, gts, fg_gt, fg_pred, zero = [], [], [], [], []
    for i, s in enumerate(samples):
        pred = oracle_prediction(s) if oracle else predict(store, s, cfg)
        gt = s.pair.S.astype(np.float64)
        y = s.pair.y_P.astype(bool)
        row = {"pair": i}
        row.update(flow_metrics(pred["flow"], gt))
        row["EPE3D_fg"] = flow_metrics(pred["flow"][y], gt[y])["EPE3D"]
        row["EPE3D_bg"] = flow_metrics(pred["flow"][~y], gt[~y])["EPE3D"]
        row.update(ego_metrics(pred["R"], pred["t"], s.pair.R, s.pair.t))
        mm = mask_metrics(pred["fg"], y)
        mm.pop("empty")
        row.update(mm)
        row.pop("n")
        rows.append(row)
        preds.append(pred["flow"])
        gts.append(gt)
        fg_gt.append(y)
        fg_pred.append(pred["fg"])
        zero.append(np.zeros_like(gt))
    P, G, Y = np.concatenate(preds), np.concatenate(gts), np.concatenate(fg_gt)
    agg: dict = {"pair": "aggregate"}
    agg.update(_prefixed("", flow_metrics(P, G)))
    agg["EPE3D_fg"] = flow_metrics(P[Y], G[Y])["EPE3D"]
    agg["EPE3D_bg"] = flow_metrics(P[~Y], G[~Y])["EPE3D"]
    agg["RAE"] = float(np.mean([r["RAE"] for r in rows]))
    agg["RTE"] = float(np.mean([r["RTE"] for r in rows]))
    mm = mask_metrics(np.concatenate(fg_pred), Y)
    mm.pop("empty")
    agg.update(mm)
    agg["EPE3D_zero"] = flow_metrics(np.concatenate(zero), G)["EPE3D"]
    return rows, agg


# -- training -------------------------------------------------------------

def save_state(store: ParamStore, path, epoch: int, position: int, step: int) -> None:
    arrays = store.state_arrays(with_optimizer=True)
    arrays["meta/epoch"] = np.array([epoch], dtype=np.float32)
    arrays["meta/position"] = np.array([position], dtype=np.float32)
    arrays["meta/step"] = np.array([step], dtype=np.float32)
    T.save_checkpoint(path, arrays)


def load_state(store: ParamStore, path) -> tuple[int, int, int]:
    arrays = T.load_checkpoint(path)
    meta = {k.partition("/")[2]: int(arrays.pop(k)[0]) for k in list(arrays) if k.startswith("meta/")}
    store.load_arrays(arrays)
    return meta.get("epoch", 0), meta.get("position", 0), meta.get("step", 0)


def load_model(path, seed: int = 0) -> ParamStore:
    store = ParamStore(seed)
    load_state(store, path)
    store.training = False
    return store


class Trainer:
    """Epoch loop over an in-memory training set.

    Every source of randomness is derived from ``cfg.train.seed`` and the
    epoch number, so an interrupted run resumed from its checkpoint replays
    the uninterrupted one exactly.
    """

    def __init__(self, cfg: Config, train_pairs: list[ScenePair], val_pairs: list[ScenePair] | None = None,
                 out_dir=None, store: ParamStore | None = None):
        if not train_pairs:
            raise ValueError("empty training set")
        self.cfg = cfg
        self.pairs = train_pairs
        self.val_pairs = val_pairs or []
        self.out_dir = Path(out_dir) if out_dir else None
        self.store = store or ParamStore(cfg.train.seed)
        self.epoch = 0
        self.position = 0
        self.step = 0
        self.history: list[dict] = []
        self._fixed: dict[int, Sample] = {}
        self._val: list[Sample] | None = None

    def sample(self, idx: int, epoch: int) -> Sample:
        tc = self.cfg.train
        if not tc.augment:
            # no per-epoch randomness: prepare once
            if idx not in self._fixed:
                self._fixed[idx] = prepare(self.pairs[idx], tc.n_points, tc.seed * 100003 + idx,
                                           False, self.cfg.model.neighbors)
            return self._fixed[idx]
        seed = (tc.seed * 1000 + epoch) * 100003 + idx
        return prepare(self.pairs[idx], tc.n_points, seed, True, self.cfg.model.neighbors)

    def validation(self) -> list[Sample]:
        if self._val is None:
            tc = self.cfg.train
            self._val = [prepare(p, tc.n_points, 7919 + i, False, self.cfg.model.neighbors)
                         for i, p in enumerate(self.val_pairs)]
        return self._val

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.cfg.train.seed, epoch]).permutation(len(self.pairs))

    def resume(self, path) -> None:
        self.epoch, self.position, self.step = load_state(self.store, path)

    def checkpoint_path(self) -> Path | None:
        return self.out_dir / CHECKPOINT_NAME if self.out_dir else None

    def save(self, path=None) -> None:
        path = path or self.checkpoint_path()
        if path is not None:
            save_state(self.store, path, self.epoch, self.position, self.step)

    def _log_epoch(self, row: dict) -> None:
        self.history.append(row)
        if self.out_dir is None:
            return
        path = self.out_dir / LOG_NAME
        new = not path.exists() or (row["epoch"] == 0)
        with open(path, "w" if new else "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(row))
            if new:
                w.writeheader()
            w.writerow(row)

    def run(self, max_steps: int | None = None, on_step=None) -> list[dict]:
        """Train until ``cfg.train.epochs`` or ``max_steps`` total steps."""
        tc = self.cfg.train
        cap = max_steps if max_steps is not None else (tc.max_steps or None)
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        while self.epoch < tc.epochs:
            if cap is not None and self.step >= cap:
                break
            lr = learning_rate(self.epoch, tc.lr, tc.lr_decay, tc.decay_epochs)
            order = self.order(self.epoch)
            sums: dict[str, float] = {}
            count = 0
            t0 = time.time()
            while self.position < len(order):
                if cap is not None and self.step >= cap:
                    break
                row = train_step(self.store, self.sample(int(order[self.position]), self.epoch), self.cfg, lr)
                for k, v in row.items():
                    sums[k] = sums.get(k, 0.0) + v
                count += 1
                self.position += 1
                self.step += 1
                if on_step is not None:
                    on_step(self.step, row)
            if self.position < len(order):
                # interrupted by the step cap mid-epoch
                self.save()
                break
            entry = {"epoch": self.epoch, "lr": lr, "steps": count, "seconds": round(time.time() - t0, 3)}
            entry.update({k: v / max(count, 1) for k, v in sums.items()})
            if self.val_pairs:
                _, agg = evaluate(self.store, self.validation(), self.cfg)
                entry.update({f"val_{k}": v for k, v in agg.items() if k != "pair"})
            log.info("epoch %d lr %.5f loss %.4f", self.epoch, lr, entry.get("total", float("nan")))
            self.epoch += 1
            self.position = 0
            self._log_epoch(entry)
            if tc.checkpoint_every and self.epoch % tc.checkpoint_every == 0:
                self.save()
        self.save()
        return self.history


# -- ablation -------------------------------------------------------------

ABLATION_COLUMNS = ("row", "EPE3D", "EPE3D_fg", "EPE3D_bg", "Acc3DS", "Acc3DR", "Out3D", "RAE", "RTE")


def run_ablation(cfg: Config, train_pairs: list[ScenePair], test_pairs: list[ScenePair],
                 rows=range(1, 8), max_steps: int | None = None) -> list[dict]:
    """Train and evaluate one model per ablation row, all from the same seed."""
    table = []
    for r in rows:
        model = replace(cfg.model, **table3_row(r))
        c = replace(cfg, model=model)
        trainer = Trainer(c, train_pairs)
        trainer.run(max_steps)
        tests = [prepare(p, c.train.n_points, 7919 + i, False, c.model.neighbors)
                 for i, p in enumerate(test_pairs)]
        _, agg = evaluate(trainer.store, tests, c)
        table.append({"row": r, **{k: agg[k] for k in ABLATION_COLUMNS[1:]}})
        log.info("ablation row %d: EPE3D %.4f", r, agg["EPE3D"])
    return table


def format_table(rows: list[dict], columns=ABLATION_COLUMNS) -> str:
    lines = [" ".join(f"{c:>9}" for c in columns)]
    for r in rows:
        lines.append(" ".join(f"{r[c]:>9.4f}" if isinstance(r[c], float) else f"{r[c]:>9}" for c in columns))
    return "\n".join(lines)
