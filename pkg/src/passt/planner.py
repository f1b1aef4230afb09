"""Policy-gradient sampling-path planner on grid reward maps.

The robot moves one cell per step in one of four directions (N, E, S, W).
Entering a cell collects its residual reward and consumes it. The policy is
a softmax over linear scores of egocentric cone features: for each action,
the mean residual reward in the cones ahead, to the right, behind and to
the left of that action's heading, at several scales, plus a bias.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DeadEnd, OutOfBounds, ShapeError
from .grid import FlowSnapshot, GridSpec

ACTIONS = ("N", "E", "S", "W")
# row 0 is south, so north is +1 row
MOVES = np.array([(1, 0), (0, 1), (-1, 0), (0, -1)])
DEFAULT_SCALES = (1, 3, 9)


@dataclass(frozen=True, eq=False)
class RewardMap:
    spec: GridSpec
    q: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        q = np.array(self.q, dtype=np.float64)
        if q.shape != self.spec.shape:
            raise ShapeError(f"reward map shape {q.shape} != grid {self.spec.shape}")
        if not np.all(np.isfinite(q)) or np.any(q < 0):
            raise ValueError("rewards must be finite and nonnegative")
        q.flags.writeable = False
        object.__setattr__(self, "q", q)

    @classmethod
    def normalized(cls, spec: GridSpec, q, time_index: int = 0) -> "RewardMap":
        q = np.asarray(q, dtype=np.float64)
        top = q.max()
        return cls(spec, q / top if top > 0 else np.zeros_like(q), time_index)

    def scaled(self, c: float) -> "RewardMap":
        return RewardMap(self.spec, self.q * c, self.time_index)


@dataclass(frozen=True)
class FeatureConfig:
    scales: tuple = DEFAULT_SCALES
    n_cones: int = 4

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if self.n_cones != 4 or not self.scales or min(self.scales) < 1:
            raise ConfigError("feature config needs 4 cones and positive scales")

    @property
    def n_features(self) -> int:
        return len(self.scales) * self.n_cones + 1


@dataclass(frozen=True, eq=False)
class PolicyParams:
    theta: np.ndarray
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        th = np.array(self.theta, dtype=np.float64).ravel()
        if th.size != self.feature_config.n_features:
            raise ShapeError(f"theta has {th.size} entries, features need {self.feature_config.n_features}")
        if not np.all(np.isfinite(th)):
            raise ValueError("theta must be finite")
        th.flags.writeable = False
        object.__setattr__(self, "theta", th)

    @classmethod
    def zeros(cls, feature_config: FeatureConfig | None = None) -> "PolicyParams":
        fc = feature_config or FeatureConfig()
        return cls(np.zeros(fc.n_features), fc)

    def __eq__(self, other):
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return self.feature_config == other.feature_config and np.array_equal(self.theta, other.theta)

    __hash__ = None


@dataclass
class SamplePath:
    cells: list  # start cell followed by one cell per step
    rewards: list
    total: float = 0.0

    @property
    def J(self) -> float:
        return self.total

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "row", "col", "reward"])
            for k, (r, c) in enumerate(self.cells):
                w.writerow([k, r, c, repr(float(self.rewards[k - 1])) if k else "0.0"])
        return path


# ---------------------------------------------------------------------------
# features


def _cone_offsets(direction: int, scale: int) -> np.ndarray:
    """Cells ahead in ``direction``: forward distance 1..scale, lateral offset within forward distance."""
    fwd = MOVES[direction]
    lat = np.array([fwd[1], fwd[0]])  # perpendicular axis (sign is irrelevant, cones are symmetric)
    offs = [f * fwd + l * lat for f in range(1, scale + 1) for l in range(-f, f + 1)]
    return np.array(offs, dtype=int)


_OFFSET_CACHE: dict = {}


def cone_offsets(direction: int, scale: int) -> np.ndarray:
    key = (direction, scale)
    if key not in _OFFSET_CACHE:
        _OFFSET_CACHE[key] = _cone_offsets(direction, scale)
    return _OFFSET_CACHE[key]


def featurize(rmap: RewardMap | np.ndarray, position, visited_mask=None,
              feature_config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Cone features ``[N scales..., E scales..., S scales..., W scales..., 1]``.

    Each entry is the mean residual reward (zero on visited cells) over the
    in-bounds cells of that cone; cones entirely off-grid give 0.
    """
    q = rmap.q if isinstance(rmap, RewardMap) else np.asarray(rmap, dtype=np.float64)
    n_rows, n_cols = q.shape
    r0, c0 = int(position[0]), int(position[1])
    if not (0 <= r0 < n_rows and 0 <= c0 < n_cols):
        raise OutOfBounds(f"position {position} outside {n_rows}x{n_cols} grid")
    resid = q if visited_mask is None else np.where(visited_mask, 0.0, q)
    feats = np.empty(feature_config.n_features)
    k = 0
    for d in range(4):
        for s in feature_config.scales:
            offs = cone_offsets(d, s)
            rr = offs[:, 0] + r0
            cc = offs[:, 1] + c0
            ok = (rr >= 0) & (rr < n_rows) & (cc >= 0) & (cc < n_cols)
            n_in = int(ok.sum())
            feats[k] = resid[rr[ok], cc[ok]].sum() / n_in if n_in else 0.0
            k += 1
    feats[k] = 1.0
    return feats


def action_features(feats: np.ndarray, n_scales: int) -> np.ndarray:
    """Egocentric per-action feature rows: ahead, right, behind, left, bias."""
    cones = feats[:-1].reshape(4, n_scales)
    out = np.empty((4, feats.size))
    for a in range(4):
        out[a, :-1] = cones[[(a + k) % 4 for k in range(4)]].ravel()
        out[a, -1] = feats[-1]
    return out


def legal_actions(position, shape) -> np.ndarray:
    r, c = position
    nxt = np.asarray(position) + MOVES
    return (nxt[:, 0] >= 0) & (nxt[:, 0] < shape[0]) & (nxt[:, 1] >= 0) & (nxt[:, 1] < shape[1])


def action_distribution(policy: PolicyParams, phi: np.ndarray, legal=None) -> np.ndarray:
    """Softmax of ``phi @ theta`` over legal actions; masked actions get 0."""
    legal = np.ones(phi.shape[0], dtype=bool) if legal is None else np.asarray(legal, dtype=bool)
    if not legal.any():
        raise DeadEnd("no legal action")
    scores = phi @ policy.theta
    scores = np.where(legal, scores, -np.inf)
    z = np.exp(scores - scores[legal].max())
    return z / z.sum()


# ---------------------------------------------------------------------------
# rollouts


def _episode(policy, q, start, horizon, rng, greedy, want_grad=False):
    n_scales = len(policy.feature_config.scales)
    shape = q.shape
    pos = (int(start[0]), int(start[1]))
    if not (0 <= pos[0] < shape[0] and 0 <= pos[1] < shape[1]):
        raise OutOfBounds(f"start {start} outside grid")
    visited = np.zeros(shape, dtype=bool)
    visited[pos] = True
    cells, rewards, glogs = [pos], [], []
    for _ in range(horizon):
        feats = featurize(q, pos, visited, policy.feature_config)
        phi = action_features(feats, n_scales)
        legal = legal_actions(pos, shape)
        probs = action_distribution(policy, phi, legal)
        if greedy:
            a = int(np.argmax(probs))  # first maximum wins: N, E, S, W order
        else:
            a = int(rng.choice(4, p=probs))
        if want_grad:
            glogs.append(phi[a] - probs @ phi)
        pos = (pos[0] + int(MOVES[a, 0]), pos[1] + int(MOVES[a, 1]))
        rewards.append(0.0 if visited[pos] else float(q[pos]))
        visited[pos] = True
        cells.append(pos)
    return cells, rewards, glogs


def rollout_policy(policy: PolicyParams, rmap: RewardMap, start, horizon: int, mode: str = "greedy",
                   seed: int = 0) -> SamplePath:
    if horizon < 1:
        raise ConfigError("horizon must be at least 1")
    if mode not in ("greedy", "sample"):
        raise ConfigError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    cells, rewards, _ = _episode(policy, rmap.q, start, horizon, rng, mode == "greedy")
    return SamplePath(cells, rewards, float(sum(rewards)))


def next_action(policy: PolicyParams, rmap: RewardMap, position, visited, mode: str = "greedy", rng=None) -> int:
    """Single planner decision, used by the closed loop."""
    feats = featurize(rmap, position, visited, policy.feature_config)
    phi = action_features(feats, len(policy.feature_config.scales))
    probs = action_distribution(policy, phi, legal_actions(position, rmap.q.shape))
    if mode == "greedy":
        return int(np.argmax(probs))
    return int(rng.choice(4, p=probs))


def random_walk(rmap: RewardMap, start, horizon: int, seed: int = 0) -> SamplePath:
    """Uniform random walk over legal moves (the zero-parameter sampling policy)."""
    return rollout_policy(PolicyParams.zeros(), rmap, start, horizon, "sample", seed)


def replay_reward(rmap: RewardMap, cells) -> float:
    """Independent re-summation of a path's reward with consumption replayed."""
    seen = {tuple(cells[0])}
    total = 0.0
    for cell in cells[1:]:
        cell = tuple(cell)
        if cell not in seen:
            total += float(rmap.q[cell])
            seen.add(cell)
    return total


def optimal_path_value(rmap: RewardMap, start, horizon: int) -> float:
    """Best achievable reward by exhaustive search over all move sequences."""
    q = rmap.q
    shape = q.shape
    best = 0.0

    def search(pos, depth, seen, acc):
        nonlocal best
        if depth == horizon:
            best = max(best, acc)
            return
        for dr, dc in MOVES:
            nxt = (pos[0] + int(dr), pos[1] + int(dc))
            if not (0 <= nxt[0] < shape[0] and 0 <= nxt[1] < shape[1]):
                continue
            if nxt in seen:
                search(nxt, depth + 1, seen, acc)
            else:
                seen.add(nxt)
                search(nxt, depth + 1, seen, acc + q[nxt])
                seen.discard(nxt)

    start = (int(start[0]), int(start[1]))
    search(start, 0, {start}, 0.0)
    return float(best)


# ---------------------------------------------------------------------------
# training on Gaussian-mixture maps


@dataclass(frozen=True)
class PolicyTrainConfig:
    n_maps: int = 500
    gmm_components: tuple = (1, 5)
    horizon: int = 30
    episodes_per_map: int = 4
    learning_rate: float = 0.01
    seed: int = 0
    grid_shape: tuple = (30, 30)
    std_range: tuple = (0.05, 0.2)  # component std as a fraction of grid size
    baseline_rate: float = 0.05
    scales: tuple = DEFAULT_SCALES

    def __post_init__(self):
        lo, hi = self.gmm_components
        if not 1 <= lo <= hi:
            raise ConfigError("gmm_components must be a range within [1, inf)")
        if self.horizon < 1 or self.n_maps < 0 or self.episodes_per_map < 1:
            raise ConfigError("invalid training sizes")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")


def gmm_map(rng, shape, components=(1, 5), std_range=(0.05, 0.2)) -> np.ndarray:
    """Random Gaussian-mixture reward field on ``shape``, max-normalized to 1."""
    n_rows, n_cols = shape
    k = int(rng.integers(components[0], components[1] + 1))
    rr, cc = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    pts = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(float)
    q = np.zeros(n_rows * n_cols)
    size = max(n_rows, n_cols)
    for _ in range(k):
        mu = rng.uniform([0, 0], [n_rows - 1, n_cols - 1])
        stds = np.maximum(rng.uniform(std_range[0], std_range[1], 2) * size, 0.5)
        ang = rng.uniform(0, np.pi)
        R = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        cov = R @ np.diag(stds**2) @ R.T
        d = pts - mu
        m = np.einsum("ni,ij,nj->n", d, np.linalg.inv(cov), d)
        w = rng.uniform(0.2, 1.0)
        q += w * np.exp(-0.5 * m) / np.sqrt(np.linalg.det(cov))
    q = q.reshape(n_rows, n_cols)
    return q / q.max()


def random_start(rng, shape) -> tuple[int, int]:
    return (int(rng.integers(shape[0])), int(rng.integers(shape[1])))


def episode_gradient(policy: PolicyParams, q: np.ndarray, start, horizon: int, rng, baseline=None):
    """One sampled episode: ``(sum_t grad log pi(a_t|s_t) (G_t - b_t), returns, rewards)``."""
    cells, rewards, glogs = _episode(policy, q, start, horizon, rng, False, want_grad=True)
    rew = np.asarray(rewards)
    returns = np.cumsum(rew[::-1])[::-1]
    adv = returns - (0.0 if baseline is None else baseline)
    grad = np.asarray(glogs).T @ adv
    return grad, returns, rew


def train_policy(config: PolicyTrainConfig = PolicyTrainConfig(), init: PolicyParams | None = None) -> PolicyParams:
    """REINFORCE with a per-step running-mean baseline on random GMM maps."""
    fc = FeatureConfig(config.scales)
    policy = init if init is not None else PolicyParams.zeros(fc)
    theta = policy.theta.copy()
    rng = np.random.default_rng(config.seed)
    baseline = np.zeros(config.horizon)
    seen = 0
    for _ in range(config.n_maps):
        q = gmm_map(rng, config.grid_shape, config.gmm_components, config.std_range)
        for _ in range(config.episodes_per_map):
            start = random_start(rng, config.grid_shape)
            grad, returns, _ = episode_gradient(PolicyParams(theta, fc), q, start, config.horizon, rng,
                                                baseline if seen else None)
            theta = theta + config.learning_rate * grad
            baseline = returns.copy() if not seen else baseline + config.baseline_rate * (returns - baseline)
            seen += 1
    return PolicyParams(theta, fc)


def evaluate_policy(policy: PolicyParams, n_maps: int = 50, horizon: int = 30, grid_shape=(30, 30),
                    seed: int = 12345, components=(1, 5), std_range=(0.05, 0.2)):
    """Mean greedy J and mean random-walk J on held-out GMM maps (random starts)."""
    rng = np.random.default_rng(seed)
    spec = GridSpec(*grid_shape)
    greedy, walk = [], []
    for i in range(n_maps):
        rmap = RewardMap(spec, gmm_map(rng, grid_shape, components, std_range))
        start = random_start(rng, grid_shape)
        greedy.append(rollout_policy(policy, rmap, start, horizon, "greedy").J)
        walk.append(np.mean([random_walk(rmap, start, horizon, seed=1000 * i + k).J for k in range(10)]))
    return float(np.mean(greedy)), float(np.mean(walk))


def save_policy(path, policy: PolicyParams, training_config: PolicyTrainConfig | None = None) -> Path:
    path = Path(path)
    doc = {
        "theta": [float(v) for v in policy.theta],
        "feature_config": {"scales": list(policy.feature_config.scales), "n_cones": policy.feature_config.n_cones},
        "training_config": asdict(training_config) if training_config else None,
        "seed": training_config.seed if training_config else None,
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_policy(path) -> PolicyParams:
    doc = json.loads(Path(path).read_text())
    fc = doc.get("feature_config") or {}
    return PolicyParams(doc["theta"], FeatureConfig(tuple(fc.get("scales", DEFAULT_SCALES)), fc.get("n_cones", 4)))


# ---------------------------------------------------------------------------
# reward from a model prediction


def _max_normalize(x: np.ndarray) -> np.ndarray:
    top = x.max()
    return x / top if top > 0 else np.zeros_like(x)


def reward_from_prediction(pred: FlowSnapshot, staleness, lam: float = 0.5) -> RewardMap:
    """``q = norm(speed) + lam * norm(staleness)``, max-normalized."""
    staleness = np.asarray(staleness, dtype=np.float64)
    if staleness.shape != pred.spec.shape:
        raise ShapeError(f"staleness shape {staleness.shape} != grid {pred.spec.shape}")
    q = _max_normalize(pred.speed()) + lam * _max_normalize(staleness)
    return RewardMap.normalized(pred.spec, q, pred.time_index)
