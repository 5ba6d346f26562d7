"""Per-epoch snapshots of the data parameters.

A trajectory records every data parameter at each epoch end so a learned
schedule can be averaged across folds and replayed as fixed multipliers.
Instance weights are stored sparsely: an absent entry means the weight
still has its initial value 1. Class tables, the decay coefficient, and
temperature tables are stored densely.

Interchange format: comma-separated `epoch,kind,id,value` rows with kind
in {inst, class, wd, sigma_inst, sigma_class}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TRAJECTORY_KINDS = ("inst", "class", "wd", "sigma_inst", "sigma_class")


@dataclass
class EpochSnapshot:
    epoch: int
    n_instances: int
    w_inst_sparse: dict
    w_class: np.ndarray
    lam_wd: float
    sigma_class: np.ndarray | None = None
    sigma_inst: np.ndarray | None = None

    def as_tables(self):
        """Dense weight tables for this epoch, suitable for replay."""
        w_inst = np.ones(self.n_instances)
        if self.w_inst_sparse:
            idx = np.fromiter(self.w_inst_sparse.keys(), dtype=np.int64)
            w_inst[idx] = np.fromiter(self.w_inst_sparse.values(), dtype=np.float64)
        return {
            "w_inst": w_inst,
            "w_class": self.w_class.copy(),
            "lam_wd": self.lam_wd,
            "sigma_class": None if self.sigma_class is None else self.sigma_class.copy(),
            "sigma_inst": None if self.sigma_inst is None else self.sigma_inst.copy(),
        }


@dataclass
class TrajectoryLog:
    n_instances: int
    n_classes: int
    snapshots: list = field(default_factory=list)

    @property
    def epochs(self):
        return len(self.snapshots)

    def record(self, dps):
        """Append an epoch-end snapshot of the data-parameter state."""
        if dps.w_inst.size != self.n_instances or dps.w_class.size != self.n_classes:
            raise ValueError("data-parameter dimensions do not match the trajectory")
        nonunit = np.flatnonzero(dps.w_inst != 1.0)
        snap = EpochSnapshot(
            epoch=len(self.snapshots),
            n_instances=self.n_instances,
            w_inst_sparse={int(i): float(dps.w_inst[i]) for i in nonunit},
            w_class=dps.w_class.copy(),
            lam_wd=float(dps.lam_wd),
            sigma_class=None if dps.sigma_class is None else dps.sigma_class.copy(),
            sigma_inst=None if dps.sigma_inst is None else dps.sigma_inst.copy(),
        )
        self.snapshots.append(snap)
        return snap

    def snapshot(self, epoch):
        if not 0 <= epoch < len(self.snapshots):
            raise ValueError(
                f"epoch {epoch} outside recorded range [0, {len(self.snapshots)})"
            )
        return self.snapshots[epoch]

    def to_csv(self, path):
        lines = ["epoch,kind,id,value"]
        for snap in self.snapshots:
            e = snap.epoch
            for i in sorted(snap.w_inst_sparse):
                lines.append(f"{e},inst,{i},{snap.w_inst_sparse[i]!r}")
            for c, v in enumerate(snap.w_class):
                lines.append(f"{e},class,{c},{float(v)!r}")
            lines.append(f"{e},wd,0,{snap.lam_wd!r}")
            if snap.sigma_class is not None:
                for c, v in enumerate(snap.sigma_class):
                    lines.append(f"{e},sigma_class,{c},{float(v)!r}")
            if snap.sigma_inst is not None:
                for i, v in enumerate(snap.sigma_inst):
                    lines.append(f"{e},sigma_inst,{i},{float(v)!r}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path, n_instances, n_classes):
        rows = []
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != "epoch,kind,id,value":
                raise ValueError(f"unrecognized trajectory header {header!r}")
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                e, kind, ident, value = line.split(",")
                if kind not in TRAJECTORY_KINDS:
                    raise ValueError(f"unknown trajectory kind {kind!r}")
                rows.append((int(e), kind, int(ident), float(value)))
        log = cls(n_instances=n_instances, n_classes=n_classes)
        if not rows:
            return log
        n_epochs = max(r[0] for r in rows) + 1
        for e in range(n_epochs):
            log.snapshots.append(
                EpochSnapshot(
                    epoch=e,
                    n_instances=n_instances,
                    w_inst_sparse={},
                    w_class=np.ones(n_classes),
                    lam_wd=0.0,
                    sigma_class=None,
                    sigma_inst=None,
                )
            )
        for e, kind, ident, value in rows:
            snap = log.snapshots[e]
            if kind == "inst":
                snap.w_inst_sparse[ident] = value
            elif kind == "class":
                snap.w_class[ident] = value
            elif kind == "wd":
                snap.lam_wd = value
            elif kind == "sigma_class":
                if snap.sigma_class is None:
                    snap.sigma_class = np.ones(n_classes)
                snap.sigma_class[ident] = value
            else:
                if snap.sigma_inst is None:
                    snap.sigma_inst = np.zeros(n_instances)
                snap.sigma_inst[ident] = value
        return log


def average_trajectories(logs, memberships=None):
    """Fold-average per-epoch trajectories into one schedule.

    ``memberships[f]`` lists the instance indices that were trainable in
    fold f; an instance's weight is averaged over exactly those folds.
    Class tables, the decay coefficient, and temperature tables average
    over all folds. With memberships None every fold counts everywhere.
    """
    if not logs:
        raise ValueError("no trajectories to average")
    n_instances = logs[0].n_instances
    n_classes = logs[0].n_classes
    n_epochs = logs[0].epochs
    for log in logs:
        if (log.n_instances, log.n_classes, log.epochs) != (
            n_instances,
            n_classes,
            n_epochs,
        ):
            raise ValueError("trajectories differ in shape or epoch count")
    if memberships is None:
        counts = np.full(n_instances, len(logs), dtype=np.float64)
        masks = [np.ones(n_instances, dtype=bool) for _ in logs]
    else:
        if len(memberships) != len(logs):
            raise ValueError("one membership set per trajectory required")
        masks = []
        for member in memberships:
            mask = np.zeros(n_instances, dtype=bool)
            mask[np.asarray(member, dtype=np.int64)] = True
            masks.append(mask)
        counts = np.sum(masks, axis=0).astype(np.float64)
    out = TrajectoryLog(n_instances=n_instances, n_classes=n_classes)
    for e in range(n_epochs):
        snaps = [log.snapshots[e] for log in logs]
        tables = [s.as_tables() for s in snaps]
        w_inst = np.zeros(n_instances)
        for t, mask in zip(tables, masks):
            w_inst[mask] += t["w_inst"][mask]
        covered = counts > 0
        w_inst[covered] /= counts[covered]
        w_inst[~covered] = 1.0
        sigma_class = None
        if tables[0]["sigma_class"] is not None:
            sigma_class = np.mean([t["sigma_class"] for t in tables], axis=0)
        sigma_inst = None
        if tables[0]["sigma_inst"] is not None:
            sigma_inst = np.zeros(n_instances)
            for t, mask in zip(tables, masks):
                sigma_inst[mask] += t["sigma_inst"][mask]
            sigma_inst[covered] /= counts[covered]
        nonunit = np.flatnonzero(w_inst != 1.0)
        out.snapshots.append(
            EpochSnapshot(
                epoch=e,
                n_instances=n_instances,
                w_inst_sparse={int(i): float(w_inst[i]) for i in nonunit},
                w_class=np.mean([t["w_class"] for t in tables], axis=0),
                lam_wd=float(np.mean([t["lam_wd"] for t in tables])),
                sigma_class=sigma_class,
                sigma_inst=sigma_inst,
            )
        )
    return out
