"""Shared dataset container, training config, and CSV wire format."""

from dataclasses import dataclass

import numpy as np

from .numerics import as_mat


@dataclass
class LabeledDataset:
    """Points with integer class labels and an optional manifold tag."""

    points: np.ndarray  # n x d
    labels: np.ndarray  # n
    manifold_tag: np.ndarray | None = None

    def __post_init__(self):
        self.points = as_mat(self.points)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape[0] != self.points.shape[0]:
            raise ValueError("labels and points disagree in length")
        if self.manifold_tag is not None:
            self.manifold_tag = np.asarray(self.manifold_tag, dtype=np.int64)
            if self.manifold_tag.shape[0] != self.points.shape[0]:
                raise ValueError("manifold tags and points disagree in length")

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def n_classes(self):
        return int(np.unique(self.labels).size)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.lr <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("need lr > 0 and 0 <= momentum < 1")


def _num(x):
    return format(float(x), ".17g")


def save_dataset_csv(data, path):
    d = data.dim
    header = ",".join([f"x{i + 1}" for i in range(d)] + ["label", "manifold_tag"])
    lines = [header]
    tags = data.manifold_tag if data.manifold_tag is not None else np.zeros(data.n, dtype=np.int64)
    for i in range(data.n):
        row = [_num(v) for v in data.points[i]] + [str(int(data.labels[i])), str(int(tags[i]))]
        lines.append(",".join(row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset_csv(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    header = lines[0].split(",")
    if header[-2:] != ["label", "manifold_tag"]:
        raise ValueError(f"unexpected dataset header in {path}")
    d = len(header) - 2
    pts, labels, tags = [], [], []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != d + 2:
            raise ValueError(f"bad row width in {path}")
        pts.append([float(c) for c in cells[:d]])
        labels.append(int(cells[d]))
        tags.append(int(cells[d + 1]))
    return LabeledDataset(
        points=np.array(pts, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64),
        manifold_tag=np.array(tags, dtype=np.int64),
    )
