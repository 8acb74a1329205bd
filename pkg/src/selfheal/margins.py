"""Classifier margins: Euclidean, on-manifold geodesic, and the margin of
the manifold-projected classifier, plus the Monte-Carlo check of the
sqrt(r/d) margin-ratio bound and the 2-D subspace defense replication.

Geodesics are discretised on a symmetric k-NN graph with Dijkstra; exact
margins are computed for affine classifiers, PGD-with-bisection estimates
otherwise (tagged on the result).
"""

import heapq
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .attacks import AttackConfig, bare_model_fn, composed_model_fn, fgsm_batch, pgd
from .control import ControlObjective, PmpConfig, controlled_predict
from .data import LabeledDataset
from .dynamics import DynamicalNet, Layer, predict_batch
from .embedding import AutoencoderEmbedding, LinearSubspaceEmbedding, embed_batch, fit_pca
from .numerics import as_mat, as_vec, norm2, spawn_rng


def worker_count():
    """Worker cap from SELFHEAL_THREADS; results never depend on it."""
    raw = os.environ.get("SELFHEAL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass
class MarginValue:
    value: float
    witness: tuple  # point index, or an index pair for geodesic margins
    method: str  # "exact-affine" | "pgd-bisection" | "graph-dijkstra"
    flags: list = field(default_factory=list)


@dataclass
class MarginConfig:
    bisection_steps: int = 20
    pgd_steps: int = 50
    init_radius: float = 1.0
    max_radius_doublings: int = 12
    seed: int = 0


@dataclass
class GeodesicGraph:
    """Symmetric k-NN adjacency with Euclidean edge weights."""

    k: int
    neighbors: list  # per node: list of (j, weight)
    components: np.ndarray  # component id per node

    @property
    def n(self):
        return len(self.neighbors)

    @property
    def connected(self):
        return bool(np.all(self.components == self.components[0]))


def build_knn_graph(points, k):
    pts = as_mat(points)
    n = pts.shape[0]
    if k < 1 or k >= n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    diffs = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(diffs * diffs, axis=2))
    adjacency = [dict() for _ in range(n)]
    for i in range(n):
        order = np.argsort(dist[i], kind="stable")
        picked = 0
        for j in order:
            if j == i:
                continue
            adjacency[i][int(j)] = float(dist[i, j])
            adjacency[int(j)][i] = float(dist[i, j])  # symmetrize by union
            picked += 1
            if picked == k:
                break
    neighbors = [sorted(adj.items()) for adj in adjacency]

    components = -np.ones(n, dtype=np.int64)
    comp = 0
    for start in range(n):
        if components[start] >= 0:
            continue
        stack = [start]
        components[start] = comp
        while stack:
            i = stack.pop()
            for j, _ in neighbors[i]:
                if components[j] < 0:
                    components[j] = comp
                    stack.append(j)
        comp += 1
    return GeodesicGraph(k=k, neighbors=neighbors, components=components)


def dijkstra(graph, source):
    dist = np.full(graph.n, np.inf)
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, i = heapq.heappop(heap)
        if d > dist[i]:
            continue
        for j, w in graph.neighbors[i]:
            nd = d + w
            if nd < dist[j]:
                dist[j] = nd
                heapq.heappush(heap, (nd, j))
    return dist


def _predictions(classifier, points):
    if isinstance(classifier, DynamicalNet):
        return predict_batch(classifier, points)
    return np.array([int(classifier(points[i])) for i in range(points.shape[0])])


def manifold_margin(classifier, data, graph):
    """Half the shortest graph geodesic between differently-predicted points."""
    preds = _predictions(classifier, data.points)
    if np.all(preds == preds[0]):
        return MarginValue(
            value=math.inf, witness=(), method="graph-dijkstra", flags=["all-same-prediction"]
        )
    best = math.inf
    witness = ()
    flags = []
    for i in range(data.n):
        mask = preds != preds[i]
        if not np.any(mask):
            continue
        dist = dijkstra(graph, i)
        for j in np.nonzero(mask)[0]:
            j = int(j)
            if j <= i:
                continue
            if dist[j] < best - 1e-15:
                best = dist[j]
                witness = (i, j)
    if math.isinf(best):
        flags.append("cross-pairs-disconnected")
        return MarginValue(value=math.inf, witness=(), method="graph-dijkstra", flags=flags)
    if not graph.connected:
        flags.append("graph-has-multiple-components")
    return MarginValue(value=0.5 * best, witness=witness, method="graph-dijkstra", flags=flags)


def is_affine(net):
    return all(l.activation == "identity" for l in net.layers) and (
        net.head.activation == "identity"
    )


def collapse_affine(net):
    """Exact (W, b) of an all-identity-activation network incl. head."""
    w = None
    b = None
    for layer in net.layers + [net.head]:
        lw = layer.weight.copy()
        if layer.residual_skip:
            lw = lw + np.eye(layer.in_dim)
        if w is None:
            w, b = lw, layer.bias.copy()
        else:
            b = kernels.matvec(lw, b) + layer.bias
            w = kernels.matmul(lw, w)
    return w, b


def _exact_affine_margin(w, b, points, preds):
    """Min over points/classes of |dw.x + db| / ||dw|| for collapsed logits."""
    best = math.inf
    witness = ()
    flags = []
    n_classes = w.shape[0]
    for i in range(points.shape[0]):
        x = points[i]
        pi = int(preds[i])
        for j in range(n_classes):
            if j == pi:
                continue
            dw = w[pi] - w[j]
            db = float(b[pi] - b[j])
            nw = norm2(dw)
            if nw < 1e-300:
                continue  # identical logits: this pair can never flip
            gap = abs(kernels.dot(dw, x) + db) / nw
            if gap < best - 1e-15:
                best = gap
                witness = (i,)
    if math.isinf(best):
        flags.append("classifier-constant")
    return MarginValue(value=best, witness=witness, method="exact-affine", flags=flags)


def _bisection_point_margin(model, x, label, cfg, point_index):
    """Upper bound on the smallest flipping l2 radius for one point."""
    lo = 0.0
    hi = cfg.init_radius

    def attack_succeeds(radius, probe):
        acfg = AttackConfig(
            norm="l2",
            eps=radius,
            steps=cfg.pgd_steps,
            seed=cfg.seed,
        )
        rng = spawn_rng(cfg.seed, point_index, probe)
        _, ok, _, _ = pgd(model, x, label, acfg, rng=rng)
        return ok

    probe = 0
    doublings = 0
    while not attack_succeeds(hi, probe):
        lo = hi
        hi *= 2.0
        probe += 1
        doublings += 1
        if doublings > cfg.max_radius_doublings:
            return math.inf
    for _ in range(cfg.bisection_steps):
        mid = 0.5 * (lo + hi)
        probe += 1
        if attack_succeeds(mid, probe):
            hi = mid
        else:
            lo = mid
    return hi


def euclidean_margin(classifier, data, cfg=None, model_fn=None):
    """Smallest l2 perturbation that flips a prediction over the dataset.

    Exact for affine classifiers; otherwise an upper-bound estimate via
    PGD with radius bisection (method-tagged).
    """
    cfg = cfg or MarginConfig()
    if data.n_classes() < 2:
        raise ValueError("margins need at least two classes in the data")
    points = data.points
    if isinstance(classifier, DynamicalNet) and is_affine(classifier) and model_fn is None:
        w, b = collapse_affine(classifier)
        preds = _predictions(classifier, points)
        return _exact_affine_margin(w, b, points, preds)

    model = model_fn if model_fn is not None else bare_model_fn(classifier)
    best = math.inf
    witness = ()
    flags = []
    for i in range(points.shape[0]):
        label = model.predict(points[i])  # margin is about flipping the prediction
        est = _bisection_point_margin(model, points[i], label, cfg, i)
        if est < best - 1e-15:
            best = est
            witness = (i,)
    if math.isinf(best):
        flags.append("classifier-constant-on-all-probes")
    return MarginValue(value=best, witness=witness, method="pgd-bisection", flags=flags)


def projection_margin(classifier, embedding, data, cfg=None):
    """Euclidean margin of the composed classifier F(E(.))."""
    cfg = cfg or MarginConfig()
    if (
        isinstance(classifier, DynamicalNet)
        and is_affine(classifier)
        and isinstance(embedding, LinearSubspaceEmbedding)
    ):
        w, b = collapse_affine(classifier)
        # fold the affine projection x -> mu + P(x - mu) into the classifier
        p = kernels.matmul(embedding.basis, np.ascontiguousarray(embedding.basis.T))
        offset = embedding.mean - kernels.matvec(p, embedding.mean)
        w_c = kernels.matmul(w, p)
        b_c = b + kernels.matvec(w, offset)
        proj_pts = embed_batch(embedding, data.points)
        preds = _predictions(classifier, proj_pts)
        out = _exact_affine_margin(w_c, b_c, data.points, preds)
        if math.isinf(out.value):
            out.flags.append("composition-constant")
        return out
    model = composed_model_fn(classifier, embedding)
    return euclidean_margin(classifier, data, cfg, model_fn=model)


@dataclass
class MarginReport:
    d_euclid: float
    d_manifold: float
    d_projection: float
    witnesses: dict
    methods: dict
    flags: list

    def as_dict(self):
        return {
            "d_euclid": self.d_euclid,
            "d_manifold": self.d_manifold,
            "d_projection": self.d_projection,
            "witnesses": {k: list(v) for k, v in self.witnesses.items()},
            "methods": dict(self.methods),
            "flags": list(self.flags),
        }


def margin_report(classifier, data, embedding=None, knn=8, cfg=None):
    cfg = cfg or MarginConfig()
    graph = build_knn_graph(data.points, knn)
    de = euclidean_margin(classifier, data, cfg)
    dm = manifold_margin(classifier, data, graph)
    if embedding is not None:
        dp = projection_margin(classifier, embedding, data, cfg)
    else:
        dp = MarginValue(value=math.nan, witness=(), method="skipped", flags=[])
    return MarginReport(
        d_euclid=de.value,
        d_manifold=dm.value,
        d_projection=dp.value,
        witnesses={"euclid": de.witness, "manifold": dm.witness, "projection": dp.witness},
        methods={"euclid": de.method, "manifold": dm.method, "projection": dp.method},
        flags=[*de.flags, *dm.flags, *dp.flags],
    )


# ---------------------------------------------------------------------------
# margin-ratio Monte Carlo


@dataclass
class RatioEstimate:
    r: int
    d: int
    n_samples: int
    mean_sin: float
    se_sin: float
    mean_sin_sq: float
    se_sin_sq: float
    bound: float  # sqrt(r/d)

    def as_dict(self):
        return {
            "r": self.r,
            "d": self.d,
            "n_samples": self.n_samples,
            "mean_sin": self.mean_sin,
            "se_sin": self.se_sin,
            "mean_sin_sq": self.mean_sin_sq,
            "se_sin_sq": self.se_sin_sq,
            "bound": self.bound,
        }


def prop1_monte_carlo(r, d, n_samples, seed):
    """Monte-Carlo distribution of sin(theta) = ||V^T n|| for unit normals.

    Normals are drawn Gaussian and normalized to the sphere (the margin
    ratio is scale-invariant in n, and normalization makes E[sin^2] = r/d
    exact).  The sample stream is split into fixed chunks with sub-seeded
    generators, so results do not depend on worker count.
    """
    if not 1 <= r <= d:
        raise ValueError("need 1 <= r <= d")
    if n_samples < 1000:
        raise ValueError("need at least 1000 samples")
    chunk = 10_000
    starts = list(range(0, n_samples, chunk))
    sums = np.zeros(3)  # sum sin, sum sin^2, sum sin^4
    for ci, start in enumerate(starts):
        m = min(chunk, n_samples - start)
        rng = spawn_rng(seed, ci)
        g = rng.standard_normal((m, d))
        norms = np.sqrt(np.sum(g * g, axis=1))
        sin = np.sqrt(np.sum(g[:, :r] * g[:, :r], axis=1)) / norms
        s2 = sin * sin
        sums += np.array([float(np.sum(sin)), float(np.sum(s2)), float(np.sum(s2 * s2))])
    mean_sin = sums[0] / n_samples
    mean_s2 = sums[1] / n_samples
    var_sin = max(mean_s2 - mean_sin**2, 0.0)
    var_s2 = max(sums[2] / n_samples - mean_s2**2, 0.0)
    return RatioEstimate(
        r=r,
        d=d,
        n_samples=n_samples,
        mean_sin=mean_sin,
        se_sin=math.sqrt(var_sin / n_samples),
        mean_sin_sq=mean_s2,
        se_sin_sq=math.sqrt(var_s2 / n_samples),
        bound=math.sqrt(r / d),
    )


# ---------------------------------------------------------------------------
# subspace-defense replication (two clusters on a 1-D subspace)


@dataclass
class SubspaceDefenseRecord:
    clean_accuracy: float
    adversarial_accuracy: float
    controlled_adversarial_accuracy: float
    euclid_margin: float
    projection_margin: float
    grid_field: list  # rows (x1, x2, reconstruction loss)
    dataset: LabeledDataset
    adversarial_points: np.ndarray
    eps: float


def fig2_toy(seed=0, n_per_class=20, gap=3.0, boundary_tilt=0.05, eps=0.5, grid_half=5.0, grid_n=41):
    """Two clusters on a 1-D subspace, a transversal boundary with a small
    euclidean margin, FGSM that defeats it, and the c=0 subspace control
    that restores every prediction.  Also emits the reconstruction-loss
    field on a grid for plotting.
    """
    rng = spawn_rng(seed, 0)
    phi = math.pi / 6.0
    direction = np.array([math.cos(phi), math.sin(phi)])
    normal = np.array([-math.sin(phi), math.cos(phi)])

    offsets = gap + 0.05 * np.arange(n_per_class)
    coords = np.concatenate([offsets, -offsets])
    points = coords[:, None] * direction[None, :]
    # label by the sign the tilted boundary assigns, so clean accuracy is 1
    labels = (coords < 0).astype(np.int64)
    tags = (coords < 0).astype(np.int64)
    order = rng.permutation(points.shape[0])
    data = LabeledDataset(points=points[order], labels=labels[order], manifold_tag=tags[order])

    w = normal + boundary_tilt * direction
    head = Layer(weight=np.stack([w, -w]), bias=np.zeros(2), activation="identity")
    net = DynamicalNet(
        layers=[Layer(weight=np.eye(2), bias=np.zeros(2), activation="identity")],
        head=head,
    )

    clean_preds = predict_batch(net, data.points)
    clean_acc = float(np.mean(clean_preds == data.labels))

    model = bare_model_fn(net)
    attack = fgsm_batch(model, data.points, data.labels, eps)
    adv_preds = predict_batch(net, attack.points)
    adv_acc = float(np.mean(adv_preds == data.labels))

    pca = fit_pca(data.points, 1)
    objective = ControlObjective(embeddings=[pca], c=0.0)
    cfg = PmpConfig(max_itr=3, inner_itr=10, lr=0.5, c=0.0)
    controlled = np.array(
        [controlled_predict(net, objective, attack.points[i], cfg) for i in range(data.n)]
    )
    controlled_acc = float(np.mean(controlled == data.labels))

    de = euclidean_margin(net, data)
    dp = projection_margin(net, pca, data)

    grid = np.linspace(-grid_half, grid_half, grid_n)
    p = kernels.matmul(pca.basis, np.ascontiguousarray(pca.basis.T))
    rows = []
    for x1 in grid:
        for x2 in grid:
            x = np.array([x1, x2])
            res = (x - pca.mean) - kernels.matvec(p, x - pca.mean)
            rows.append((float(x1), float(x2), float(kernels.dot(res, res))))

    return SubspaceDefenseRecord(
        clean_accuracy=clean_acc,
        adversarial_accuracy=adv_acc,
        controlled_adversarial_accuracy=controlled_acc,
        euclid_margin=de.value,
        projection_margin=dp.value,
        grid_field=rows,
        dataset=data,
        adversarial_points=attack.points,
        eps=eps,
    )
