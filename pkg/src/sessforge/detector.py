"""A small differentiable seed-and-vote point-cloud detector.

Architecture: a shared two-layer per-point perceptron (3 -> H -> H, ReLU)
produces point features; a global feature is the coordinate-wise max over
points; farthest-point sampling picks seed points; a shared linear head maps
[seed xyz, seed feature, global feature] to a center offset, log-size, class
logits and an objectness logit per seed. Gradients are written by hand
(reverse mode) so the whole package stays dependency-light and every
gradient can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class DetectorConfig:
    hidden_width: int = 32
    head_width: int = 32
    proposal_count: int = 32
    class_count: int = 4
    positive_radius: float = 0.65
    w_objectness: float = 1.0
    w_center: float = 1.0
    w_size: float = 1.0
    w_class: float = 1.0

    def __post_init__(self):
        if self.hidden_width < 4 or self.head_width < 4:
            raise ValueError("widths must be >= 4")
        if self.proposal_count < 1:
            raise ValueError("proposal_count must be >= 1")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.positive_radius <= 0:
            raise ValueError("positive_radius must be > 0")

    @property
    def head_in_dim(self) -> int:
        return 3 + 2 * self.hidden_width

    @property
    def head_out_dim(self) -> int:
        # center offset (3) + log-size (3) + class logits (K) + objectness (1)
        return 7 + self.class_count


class ParamLayout:
    """Named views into a flat parameter vector."""

    def __init__(self, shapes: list[tuple[str, tuple[int, ...]]]):
        self._shapes = dict(shapes)
        self._offsets = {}
        off = 0
        for name, shape in shapes:
            self._offsets[name] = off
            off += int(np.prod(shape))
        self.total = off

    @classmethod
    def for_config(cls, config: DetectorConfig) -> "ParamLayout":
        h, d, o = config.hidden_width, config.head_in_dim, config.head_out_dim
        hh = config.head_width
        return cls([
            ("point_mlp1.weight", (h, 3)),
            ("point_mlp1.bias", (h,)),
            ("point_mlp2.weight", (h, h)),
            ("point_mlp2.bias", (h,)),
            ("head1.weight", (hh, d)),
            ("head1.bias", (hh,)),
            ("head2.weight", (o, hh)),
            ("head2.bias", (o,)),
        ])

    def names(self) -> list[str]:
        return list(self._shapes)

    def shape(self, name: str) -> tuple[int, ...]:
        return self._shapes[name]

    def entries(self) -> list[tuple[str, int, int]]:
        return [(n, self._offsets[n], int(np.prod(s))) for n, s in self._shapes.items()]

    def view(self, params: np.ndarray, name: str) -> np.ndarray:
        off = self._offsets[name]
        shape = self._shapes[name]
        return params[off:off + int(np.prod(shape))].reshape(shape)


def init_params(config: DetectorConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, as one flat vector."""
    layout = ParamLayout.for_config(config)
    params = np.zeros(layout.total)
    for name in layout.names():
        if name.endswith(".weight"):
            shape = layout.shape(name)
            bound = 1.0 / np.sqrt(shape[1])
            layout.view(params, name)[...] = rng.uniform(-bound, bound, size=shape)
    return params


def farthest_point_sampling(points: np.ndarray, s: int) -> np.ndarray:
    """Greedy FPS from index 0; each pick maximizes the minimum distance to
    the chosen set, ties resolved to the lowest index."""
    n = len(points)
    if not 1 <= s <= n:
        raise ValueError(f"need 1 <= s <= n, got s={s}, n={n}")
    chosen = np.empty(s, dtype=np.intp)
    chosen[0] = 0
    dists = np.linalg.norm(points - points[0], axis=1)
    dists[0] = -1.0  # chosen points can never be re-picked
    for i in range(1, s):
        nxt = int(np.argmax(dists))
        chosen[i] = nxt
        dists = np.minimum(dists, np.linalg.norm(points - points[nxt], axis=1))
        dists[nxt] = -1.0
    return chosen


@dataclass
class ForwardCache:
    """Intermediate activations needed to backpropagate through forward."""

    points: np.ndarray
    a1: np.ndarray          # pre-activation of layer 1, (n, H)
    h1: np.ndarray          # ReLU output, (n, H)
    a2: np.ndarray          # pre-activation of layer 2, (n, H)
    h2: np.ndarray          # per-point features, (n, H)
    pool_idx: np.ndarray    # argmax point per feature channel, (H,)
    seeds: np.ndarray       # FPS seed indices, (M,)
    head_in: np.ndarray     # (M, 3 + 2H)
    ha: np.ndarray          # head hidden pre-activation, (M, Hh)
    hh: np.ndarray          # head hidden ReLU output, (M, Hh)
    head_out: np.ndarray    # raw pre-activations (M, 7 + K)


@dataclass
class ProposalSet:
    """Per-proposal detector outputs.

    `class_probs` rows sum to one, `sizes` are strictly positive and
    `objectness` lies in (0, 1). `headings` is carried for geometric
    transforms; this detector always predicts zero heading.
    """

    centers: np.ndarray
    sizes: np.ndarray
    class_probs: np.ndarray
    objectness: np.ndarray
    headings: np.ndarray
    cache: ForwardCache | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.centers)


@dataclass
class OutputGrads:
    """Loss gradients w.r.t. proposal pre-activations: the center offset,
    log-size, class logits and objectness logit of each proposal."""

    d_center: np.ndarray
    d_log_size: np.ndarray
    d_class_logits: np.ndarray
    d_objectness: np.ndarray

    @classmethod
    def zeros(cls, m: int, k: int) -> "OutputGrads":
        return cls(np.zeros((m, 3)), np.zeros((m, 3)), np.zeros((m, k)), np.zeros(m))

    def add_scaled(self, other: "OutputGrads", factor: float) -> None:
        self.d_center += factor * other.d_center
        self.d_log_size += factor * other.d_log_size
        self.d_class_logits += factor * other.d_class_logits
        self.d_objectness += factor * other.d_objectness


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward(params: np.ndarray, points: np.ndarray, config: DetectorConfig) -> ProposalSet:
    """Run the detector on one point cloud (already perturbed, if at all)."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or len(x) == 0:
        raise ValueError("points must be a nonempty (n, 3) array")
    if len(x) < config.proposal_count:
        raise ValueError("need at least proposal_count points for seeding")
    layout = ParamLayout.for_config(config)
    w1 = layout.view(params, "point_mlp1.weight")
    b1 = layout.view(params, "point_mlp1.bias")
    w2 = layout.view(params, "point_mlp2.weight")
    b2 = layout.view(params, "point_mlp2.bias")
    wh1 = layout.view(params, "head1.weight")
    bh1 = layout.view(params, "head1.bias")
    wh2 = layout.view(params, "head2.weight")
    bh2 = layout.view(params, "head2.bias")

    a1 = x @ w1.T + b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ w2.T + b2
    h2 = np.maximum(a2, 0.0)
    # coordinate-wise max pool; ties resolve to the lowest point index
    pool_idx = np.argmax(h2, axis=0)
    g = h2[pool_idx, np.arange(h2.shape[1])]

    seeds = farthest_point_sampling(x, config.proposal_count)
    head_in = np.concatenate(
        [x[seeds], h2[seeds], np.broadcast_to(g, (len(seeds), len(g)))], axis=1
    )
    ha = head_in @ wh1.T + bh1
    hh = np.maximum(ha, 0.0)
    out = hh @ wh2.T + bh2

    k = config.class_count
    delta = out[:, 0:3]
    log_size = out[:, 3:6]
    logits = out[:, 6:6 + k]
    obj_logit = out[:, 6 + k]

    cache = ForwardCache(x, a1, h1, a2, h2, pool_idx, seeds, head_in, ha, hh, out)
    return ProposalSet(
        centers=x[seeds] + delta,
        sizes=np.exp(log_size),
        class_probs=_softmax(logits),
        objectness=_sigmoid(obj_logit),
        headings=np.zeros(len(seeds)),
        cache=cache,
    )


def _smooth_l1(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def _smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


def supervised_loss(props: ProposalSet, gts: list, config: DetectorConfig):
    """Assignment-based multi-task loss and its output gradients.

    Each proposal is matched to its nearest ground-truth center (lowest
    index on ties) and counts as positive iff that distance is below the
    positive radius. Objectness is penalized on every proposal; center,
    size and class terms only on positives, each averaged over its own
    support. Returns (scalar loss, OutputGrads).
    """
    if props.cache is None:
        raise ValueError("supervised_loss needs a cache-bearing student ProposalSet")
    m, k = len(props), config.class_count
    grads = OutputGrads.zeros(m, k)
    obj_logit = props.cache.head_out[:, 6 + k]

    if gts:
        gt_centers = np.stack([b.center for b in gts])
        dists = np.linalg.norm(props.centers[:, None, :] - gt_centers[None, :, :], axis=2)
        nearest = np.argmin(dists, axis=1)
        positive = dists[np.arange(m), nearest] < config.positive_radius
    else:
        nearest = np.zeros(m, dtype=np.intp)
        positive = np.zeros(m, dtype=bool)

    # objectness: binary cross-entropy over all proposals, in logit form
    y = positive.astype(np.float64)
    loss_obj = float(np.mean(np.logaddexp(0.0, obj_logit) - y * obj_logit))
    grads.d_objectness = config.w_objectness * (props.objectness - y) / m

    loss_ctr = loss_size = loss_cls = 0.0
    n_pos = int(positive.sum())
    if n_pos > 0:
        pos = np.flatnonzero(positive)
        tgt = nearest[pos]
        gt_size = np.stack([gts[j].size for j in tgt])
        gt_cls = np.array([gts[j].class_id for j in tgt])

        res_c = props.centers[pos] - gt_centers[tgt]
        loss_ctr = float(np.sum(_smooth_l1(res_c)) / n_pos)
        grads.d_center[pos] = config.w_center * _smooth_l1_grad(res_c) / n_pos

        res_s = props.cache.head_out[pos, 3:6] - np.log(gt_size)
        loss_size = float(np.sum(_smooth_l1(res_s)) / n_pos)
        grads.d_log_size[pos] = config.w_size * _smooth_l1_grad(res_s) / n_pos

        # cross-entropy in logit form: logsumexp(z) - z[target]
        z = props.cache.head_out[pos, 6:6 + k]
        zmax = z.max(axis=1)
        lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
        loss_cls = float(np.mean(lse - z[np.arange(n_pos), gt_cls]))
        dlogits = props.class_probs[pos].copy()
        dlogits[np.arange(n_pos), gt_cls] -= 1.0
        grads.d_class_logits[pos] = config.w_class * dlogits / n_pos

    loss = (config.w_objectness * loss_obj + config.w_center * loss_ctr
            + config.w_size * loss_size + config.w_class * loss_cls)
    return loss, grads


def backward(params: np.ndarray, cache: ForwardCache, out_grads: OutputGrads,
             config: DetectorConfig) -> np.ndarray:
    """Exact gradient of the loss w.r.t. every parameter, given gradients
    w.r.t. the head pre-activations. The max-pool subgradient is routed to
    the argmax point recorded in the cache."""
    layout = ParamLayout.for_config(config)
    w2 = layout.view(params, "point_mlp2.weight")
    wh1 = layout.view(params, "head1.weight")
    wh2 = layout.view(params, "head2.weight")
    h = config.hidden_width

    d_out = np.concatenate(
        [out_grads.d_center, out_grads.d_log_size, out_grads.d_class_logits,
         out_grads.d_objectness[:, None]], axis=1
    )

    grad = np.zeros_like(params)
    layout.view(grad, "head2.weight")[...] = d_out.T @ cache.hh
    layout.view(grad, "head2.bias")[...] = d_out.sum(axis=0)

    d_hh = (d_out @ wh2) * (cache.ha > 0.0)
    layout.view(grad, "head1.weight")[...] = d_hh.T @ cache.head_in
    layout.view(grad, "head1.bias")[...] = d_hh.sum(axis=0)

    d_head_in = d_hh @ wh1
    # head input layout: [seed xyz | seed feature | global feature]
    d_h2 = np.zeros_like(cache.h2)
    np.add.at(d_h2, cache.seeds, d_head_in[:, 3:3 + h])
    d_g = d_head_in[:, 3 + h:].sum(axis=0)
    d_h2[cache.pool_idx, np.arange(h)] += d_g

    d_a2 = d_h2 * (cache.a2 > 0.0)
    layout.view(grad, "point_mlp2.weight")[...] = d_a2.T @ cache.h1
    layout.view(grad, "point_mlp2.bias")[...] = d_a2.sum(axis=0)

    d_a1 = (d_a2 @ w2) * (cache.a1 > 0.0)
    layout.view(grad, "point_mlp1.weight")[...] = d_a1.T @ cache.points
    layout.view(grad, "point_mlp1.bias")[...] = d_a1.sum(axis=0)
    return grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected adaptive-moment update; mutates `state`, returns
    the new parameter vector."""
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


def save_checkpoint(path, params: np.ndarray, layout: ParamLayout) -> None:
    """Text checkpoint: a count line, `name offset length` per entry, then
    one value per line at 17 significant digits (bit-exact round trip)."""
    entries = layout.entries()
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"params {len(entries)} {layout.total}\n")
        for name, off, length in entries:
            f.write(f"{name} {off} {length}\n")
        for v in params:
            f.write(f"{v:.17g}\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (params, entries) with entries a list of
    (name, offset, length)."""
    with open(path, encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != "params":
            raise ValueError(f"{path}: not a checkpoint file")
        n_entries, total = int(header[1]), int(header[2])
        entries = []
        for _ in range(n_entries):
            name, off, length = f.readline().split()
            entries.append((name, int(off), int(length)))
        params = np.array([float(f.readline()) for _ in range(total)])
    if sum(e[2] for e in entries) != total:
        raise ValueError(f"{path}: layout does not cover the parameter vector")
    return params, entries
