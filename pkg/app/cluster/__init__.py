"""Feature extraction, k-means, partitioning and PCA export"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, PositiveFloat, PositiveInt
from sklearn.decomposition import PCA
from torch.utils.data import DataLoader

from app.augment import AugmentationPolicy, Normalization, ViewDataset
from app.dataset import LabeledDataset
from app.errors import (
    AssignmentError,
    DegenerateInputError,
    EmptyClusterError,
    InvalidClusterCountError,
    ShapeMismatchError,
)
from app.models import ModelBundle, encode
from app.utils import make_generator, resolve_device

logger = logging.getLogger(__name__)

# rows × K × d elements per distance chunk
_CHUNK_ELEMENTS = 1 << 22


class ClusterConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: PositiveInt = 5
    max_iters: PositiveInt = 300
    tol: PositiveFloat = 1e-4
    n_init: PositiveInt = 10
    max_retries: int = 5
    normalize: bool = False


@dataclass
class FeatureMatrix:
    """N×d features plus the source record index of each row"""
    values: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.values.ndim != 2:
            raise ShapeMismatchError(f"features must be N×d, got {self.values.shape}")
        if len(self.indices) != len(self.values):
            raise ShapeMismatchError("features and indices differ in length")
        if not np.isfinite(self.values).all():
            raise DegenerateInputError("features contain non-finite values")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def normalized(self) -> "FeatureMatrix":
        norms = np.linalg.norm(self.values, axis=1, keepdims=True)
        if (norms == 0).any():
            raise DegenerateInputError("cannot L2-normalize a zero feature row")
        return FeatureMatrix(self.values / norms, self.indices)


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    seed: int = 0
    n_iter: int = 0
    history: List[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def sizes(self) -> List[int]:
        return np.bincount(self.assignments, minlength=self.k).tolist()


def _values(X) -> np.ndarray:
    return X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)


@torch.no_grad()
def extract_features(
    bundle: ModelBundle,
    dataset: LabeledDataset,
    normalization: Optional[Normalization] = None,
    batch_size: int = 256,
    device: Optional[str] = None,
) -> FeatureMatrix:
    """Eval-mode backbone features of every record, in dataset order"""
    dev = resolve_device(device)
    was_training = bundle.training
    bundle.to(dev).eval()

    policy = AugmentationPolicy(normalization=normalization or Normalization())
    loader = DataLoader(
        ViewDataset(dataset, policy, mode="eval"), batch_size=batch_size, shuffle=False, generator=make_generator(0)
    )
    chunks = [encode(bundle, views.to(dev)).cpu().double().numpy() for views, _, _ in loader]
    bundle.train(was_training)

    values = np.concatenate(chunks) if chunks else np.zeros((0, bundle.output_dim))
    logger.info(f"Extracted {values.shape[0]}×{values.shape[1]} features")
    return FeatureMatrix(values, dataset.indices)


def squared_distances(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """N×K squared Euclidean distances, computed by explicit differences in row chunks"""
    n, k = len(X), len(centroids)
    rows = max(1, _CHUNK_ELEMENTS // max(1, k * X.shape[1]))
    out = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, rows):
        diff = X[start:start + rows, None, :] - centroids[None, :, :]
        out[start:start + rows] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _nearest(X: np.ndarray, centroids: np.ndarray):
    d2 = squared_distances(X, centroids)
    # argmin returns the first minimum, so ties go to the lowest index
    labels = d2.argmin(axis=1)
    return labels, float(d2[np.arange(len(X)), labels].sum())


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D²-weighted seeding"""
    n = len(X)
    centroids = np.empty((k, X.shape[1]), dtype=np.float64)
    centroids[0] = X[rng.integers(0, n)]
    closest = squared_distances(X, centroids[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(0, n)
        centroids[i] = X[idx]
        closest = np.minimum(closest, squared_distances(X, centroids[i:i + 1])[:, 0])
    return centroids


def _lloyd(X: np.ndarray, centroids: np.ndarray, max_iters: int, tol: float):
    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        labels, inertia = _nearest(X, centroids)
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)

        updated = centroids.copy()
        for j in range(len(centroids)):
            members = labels == j
            # empty clusters keep their previous centroid
            if members.any():
                updated[j] = X[members].mean(axis=0)
        shift = float(np.linalg.norm(updated - centroids))
        centroids = updated
        if shift < tol:
            break

    labels, inertia = _nearest(X, centroids)
    history.append(inertia)
    return centroids, labels, inertia, n_iter, history


def kmeans(
    X: Union[FeatureMatrix, np.ndarray],
    K: int,
    seed: int = 0,
    max_iters: int = 300,
    tol: float = 1e-4,
    n_init: int = 10,
) -> ClusterModel:
    """k-means++ seeded Lloyd iterations; best of `n_init` restarts by inertia

    Deterministic given (X, K, seed). The returned assignments are the
    nearest-centroid labels of the returned centroids.
    """
    values = _values(X)
    n = len(values)
    if K < 1 or K > n:
        raise InvalidClusterCountError(f"K={K} must lie in [1, N={n}]")

    rng = np.random.default_rng(seed)
    best: Optional[ClusterModel] = None
    for restart in range(n_init):
        child = np.random.default_rng(rng.integers(0, 2**63 - 1))
        init = kmeans_plusplus(values, K, child)
        centroids, labels, inertia, n_iter, history = _lloyd(values, init, max_iters, tol)
        logger.debug(f"k-means restart {restart}: inertia {inertia:.6g} after {n_iter} iterations")
        if best is None or inertia < best.inertia:
            best = ClusterModel(centroids, labels, inertia, seed=seed, n_iter=n_iter, history=history)
    return best


def assign(model: ClusterModel, X: Union[FeatureMatrix, np.ndarray]) -> np.ndarray:
    """Nearest-centroid index per row, ties to the lowest index"""
    values = _values(X)
    if values.ndim != 2 or values.shape[1] != model.centroids.shape[1]:
        raise ShapeMismatchError(
            f"features are {values.shape}, centroids are {model.centroids.shape}"
        )
    return _nearest(values, model.centroids)[0]


def partition(dataset: LabeledDataset, labels: Sequence[int], K: int) -> List[LabeledDataset]:
    """Subset k holds the records labelled k, in dataset order"""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(dataset):
        raise AssignmentError(f"{len(labels)} labels for {len(dataset)} records")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise AssignmentError(f"cluster labels must lie in [0, {K})")
    return [dataset.subset(np.flatnonzero(labels == k)) for k in range(K)]


def cluster_with_retries(X: Union[FeatureMatrix, np.ndarray], cfg: ClusterConfig, seed: int) -> ClusterModel:
    """k-means that reseeds (seed+1, seed+2, ...) while any cluster is empty"""
    if isinstance(X, FeatureMatrix) and cfg.normalize:
        X = X.normalized()
    elif cfg.normalize:
        X = FeatureMatrix(X, np.arange(len(X))).normalized()

    for attempt in range(cfg.max_retries + 1):
        model = kmeans(X, cfg.k, seed + attempt, cfg.max_iters, cfg.tol, cfg.n_init)
        if min(model.sizes) > 0:
            logger.info(f"k-means K={cfg.k}: sizes {model.sizes}, inertia {model.inertia:.6g}")
            return model
        logger.warning(f"⚠️ k-means seed {seed + attempt} left an empty cluster (sizes {model.sizes}), reseeding")
    raise EmptyClusterError(f"empty cluster after {cfg.max_retries} reseeds")


def fit_pca(X: Union[FeatureMatrix, np.ndarray], out_dim: int = 2) -> PCA:
    """Exact (full-SVD) PCA; each component is signed so its largest-magnitude loading is positive"""
    values = _values(X)
    if len(values) < 2:
        raise DegenerateInputError("PCA needs at least two rows")
    if out_dim > values.shape[1]:
        raise ShapeMismatchError(f"cannot project {values.shape[1]}-d data onto {out_dim} components")
    return PCA(n_components=out_dim, svd_solver="full").fit(values)


def pca_components(X: Union[FeatureMatrix, np.ndarray], out_dim: int = 2):
    """(components out_dim×d, explained variances, mean), descending variance"""
    pca = fit_pca(X, out_dim)
    return pca.components_, pca.explained_variance_, pca.mean_


def pca_project(X: Union[FeatureMatrix, np.ndarray], out_dim: int = 2) -> np.ndarray:
    return fit_pca(X, out_dim).transform(_values(X))


def export_assignments(path: Union[str, Path], indices: Sequence[int], labels: Sequence[int]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"record_index": indices, "cluster": labels}).to_csv(path, index=False)
    return path


def export_pca(
    path: Union[str, Path],
    features: FeatureMatrix,
    clusters: Sequence[int],
    true_labels: Sequence[int],
) -> Path:
    """record_index,pc1,pc2,cluster,true_label"""
    coords = pca_project(features, 2)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({
        "record_index": features.indices,
        "pc1": coords[:, 0],
        "pc2": coords[:, 1],
        "cluster": clusters,
        "true_label": true_labels,
    }).to_csv(path, index=False)
    return path


def load_assignments(path: Union[str, Path]) -> np.ndarray:
    frame = pd.read_csv(path)
    return frame["cluster"].to_numpy(dtype=np.int64)
