"""Point-addition attacks under a Hausdorff bound and a point budget.

All four variants share one projected-gradient-ascent loop. They differ only
in how the step size and the projection radius evolve over the ``M`` steps:

=========  ========================  ===========================
variant    step size                 projection radius
=========  ========================  ===========================
PGD        constant                  epsilon
VSA        alpha_init -> alpha_final epsilon
VBA        constant                  epsilon_init -> epsilon
VBA_VSA    alpha_init -> alpha_final epsilon_init -> epsilon
=========  ========================  ===========================

Steps are numbered 1..M. Step ``i`` uses the schedules evaluated at ``i``, so
step M runs with ``alpha_final`` and projects onto the final ``epsilon``.

The loop is vectorized over a batch of clouds; :func:`run_attack` is the
single-cloud case.
"""

import copy
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .geometry import PROJECTION_TOL, DeltaSet, _norm3, as_cloud, hausdorff_distance
from .model import (
    added_points_objective_and_gradient,
    forward_batch,
    objective_and_gradient_batch,
    pooled_features,
)

VARIANTS = ("PGD", "VSA", "VBA", "VBA_VSA")

ZERO_GRAD_TOL = 1e-12
DEFAULT_STEPS = 500


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    n: int
    steps: int = DEFAULT_STEPS
    alpha_init: float = 0.1
    alpha_final: float = 0.1
    epsilon_init: float = None
    variant: str = "VSA"
    seed: int = 0
    normalization: str = "per_point"  # or "global"
    random_direction: str = "independent"  # or "shared"

    def __post_init__(self):
        if self.epsilon_init is None:
            object.__setattr__(self, "epsilon_init", self.epsilon)
        self.validate()

    def validate(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if not (self.alpha_init > 0 and self.alpha_final > 0):
            raise ValueError("step sizes must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.epsilon_init < self.epsilon:
            raise ValueError("epsilon_init must be at least epsilon")
        if self.normalization not in ("global", "per_point"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.random_direction not in ("independent", "shared"):
            raise ValueError(f"unknown random_direction {self.random_direction!r}")

    def to_dict(self):
        return asdict(self)

    def alpha_at(self, step):
        return schedule_value(self.alpha_init, self.alpha_final, step, self.steps)

    def epsilon_at(self, step):
        return schedule_value(self.epsilon_init, self.epsilon, step, self.steps)


def default_hyperparams(epsilon, n, variant="VSA", steps=DEFAULT_STEPS, seed=0):
    """Default schedule endpoints for each variant.

    VSA decays alpha from 0.1 to min(0.5/n, eps/2). VBA and PGD use the
    constant alpha min(1/n, eps); VBA starts its radius at 2*eps.
    """
    if not epsilon > 0 or n < 1:
        raise ValueError("epsilon and n must be positive")
    constant = min(1.0 / n, epsilon)
    if variant in ("VSA", "VBA_VSA"):
        a0, a1 = 0.1, min(0.5 / n, epsilon / 2.0)
    elif variant in ("PGD", "VBA"):
        a0 = a1 = constant
    else:
        raise ValueError(f"unknown variant {variant!r}")
    eps0 = 2.0 * epsilon if variant in ("VBA", "VBA_VSA") else epsilon
    return AttackConfig(epsilon=epsilon, n=n, steps=steps, alpha_init=a0,
                        alpha_final=a1, epsilon_init=eps0, variant=variant, seed=seed)


def schedule_value(start, end, step_index, M):
    """Linear interpolation from ``start`` (step 0) to ``end`` (step M)."""
    if M < 1 or not 0 <= step_index <= M:
        raise ValueError(f"step_index {step_index} outside [0, {M}]")
    if step_index == M:
        return end
    return start + (step_index / M) * (end - start)


# --- schedules for wrap_with_schedule ---------------------------------------
# A schedule maps the 1-based number of the step about to be taken to a
# step size.


def constant_schedule(value):
    return lambda step: value


def linear_schedule(start, end, M):
    return lambda step: schedule_value(start, end, step, M)


def halving_schedule(start, period=None):
    """start, start/2, start/4, ... ; restarts every ``period`` steps if set."""

    def value(step):
        j = step - 1
        if period:
            j %= period
        return start / 2.0**j

    return value


def wrap_with_schedule(step_fn, schedule):
    """Turn ``step_fn(state, step_size)`` into ``wrapped(state)`` whose step
    size follows ``schedule``. ``state.step_index`` counts completed steps."""

    def wrapped(state):
        return step_fn(state, schedule(state.step_index + 1))

    wrapped.__wrapped__ = step_fn
    wrapped.schedule = schedule
    return wrapped


# --- state --------------------------------------------------------------------


@dataclass
class StepState:
    """Batched attack state.

    ``delta`` is ``(B, n, 3)``, ``nn_index`` ``(B, n)``. ``alpha_current`` and
    ``epsilon_current`` are the values used by the last completed step (the
    schedule start values before any step). The generators are advanced in
    place by each step.
    """

    delta: np.ndarray
    nn_index: np.ndarray
    step_index: int
    alpha_current: float
    epsilon_current: float
    rngs: list
    # max-pooled features of the original clouds; fixed for the whole run
    base_pooled: np.ndarray = None
    # (losses, logits, grads) at the current delta, if already computed
    cached: tuple = None

    def delta_set(self, b=0):
        return DeltaSet(self.delta[b].copy(), self.nn_index[b].copy())

    def copy(self):
        return StepState(self.delta.copy(), self.nn_index.copy(), self.step_index,
                         self.alpha_current, self.epsilon_current,
                         copy.deepcopy(self.rngs), self.base_pooled, None)


@dataclass
class AttackResult:
    adversarial: np.ndarray  # (k + n, 3): original points first
    delta: DeltaSet
    label: int
    success: bool
    predicted: int
    objective_trace: np.ndarray  # objective after each step
    final_hausdorff: float
    steps_used: int
    first_success_step: int | None = None  # 0 means init already succeeded
    config: AttackConfig = field(default=None, repr=False)

    @property
    def n_original(self):
        return len(self.adversarial) - len(self.delta)


def _rng_for(seed):
    return np.random.default_rng(seed)


def _stack(clouds):
    arr = np.asarray([as_cloud(c) for c in clouds]) if isinstance(clouds, list) else np.asarray(clouds, np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected (B, k, 3) clouds, got {arr.shape}")
    return arr


def init_delta_batch(model, clouds, labels, n):
    """Copies of the ``n`` points with the largest input-gradient norm.

    Ties are ranked by lowest index. Returns ``(delta (B, n, 3), index (B, n))``.
    """
    clouds = _stack(clouds)
    if n > clouds.shape[1]:
        raise ValueError(f"n={n} exceeds cloud size {clouds.shape[1]}")
    if n < 1:
        raise ValueError("n must be at least 1")
    _, _, grads = objective_and_gradient_batch(model, clouds, labels)
    norms = np.sqrt((grads * grads).sum(axis=-1))
    order = np.argsort(-norms, axis=1, kind="stable")[:, :n]
    return np.take_along_axis(clouds, order[..., None], axis=1).copy(), order


def init_delta(model, cloud, label, n):
    """Single-cloud :func:`init_delta_batch` returning a :class:`DeltaSet`."""
    delta, idx = init_delta_batch(model, as_cloud(cloud)[None], [label], n)
    return DeltaSet(delta[0], idx[0])


def initial_state(model, clouds, labels, config, seeds=None):
    clouds = _stack(clouds)
    delta, idx = init_delta_batch(model, clouds, labels, config.n)
    if seeds is None:
        seeds = [config.seed] * len(clouds)
    return StepState(delta, idx, 0, config.alpha_init, config.epsilon_init,
                     [_rng_for(s) for s in seeds], pooled_features(model, clouds))


def _evaluate(model, clouds, state, labels):
    """Objective, logits and added-point gradients of ``clouds ∪ delta``."""
    if state.base_pooled is None:
        state.base_pooled = pooled_features(model, clouds)
    return added_points_objective_and_gradient(model, state.base_pooled, state.delta, labels)


def _random_directions(rng, count, shared):
    if shared:
        v = rng.normal(size=3)
        v = np.tile(v / np.linalg.norm(v), (count, 1))
    else:
        v = rng.normal(size=(count, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v


def _project_batch(delta, clouds, eps):
    """Vectorized projection of (B, n, 3) added points onto the eps ball of
    their nearest original point."""
    dist = _norm3(delta[:, :, None, :] - clouds[:, None, :, :])  # (B, n, k)
    idx = dist.argmin(axis=2)
    d = np.take_along_axis(dist, idx[..., None], axis=2)[..., 0]
    anchor = np.take_along_axis(clouds, idx[..., None], axis=1)
    out = delta.copy()
    bad = d > eps + PROJECTION_TOL
    if np.any(bad):
        offset = delta[bad] - anchor[bad]
        out[bad] = anchor[bad] + eps * (offset / d[bad][:, None])
    return out, idx


def pgd_step(model, clouds, labels, state, alpha, epsilon_boundary,
             normalization="per_point", random_direction="independent"):
    """One ascent-and-project step with explicit step size and radius.

    Returns ``(new_state, losses, logits)`` where losses/logits describe the
    clouds *before* the move.
    """
    if state.cached is not None:
        losses, logits, grads = state.cached
    else:
        losses, logits, grads = _evaluate(model, clouds, state, labels)
    g = grads
    pnorm = np.sqrt((g * g).sum(axis=-1))
    zero = pnorm < ZERO_GRAD_TOL
    moved = state.delta.copy()
    for b in range(len(clouds)):
        live = ~zero[b]
        if np.any(live):
            gb = g[b, live]
            if normalization == "global":
                moved[b, live] += alpha * (gb / np.sqrt((gb * gb).sum()))
            else:
                moved[b, live] += alpha * (gb / pnorm[b, live][:, None])
        if np.any(zero[b]):
            v = _random_directions(state.rngs[b], int(zero[b].sum()), random_direction == "shared")
            moved[b, zero[b]] += alpha * v
    projected, idx = _project_batch(moved, clouds, epsilon_boundary)
    new = StepState(projected, idx, state.step_index + 1, alpha, epsilon_boundary,
                    state.rngs, state.base_pooled)
    return new, losses, logits


def attack_step(model, clouds, labels, state, config):
    """Advance a batched state by one step of ``config.variant``."""
    clouds = _stack(clouds)
    i = state.step_index + 1
    new, _, _ = pgd_step(model, clouds, labels, state, config.alpha_at(i),
                         config.epsilon_at(i), config.normalization, config.random_direction)
    return new


def pgd_step_fn(model, clouds, labels, config):
    """Constant-radius ascent step parameterized only by step size, for use
    with :func:`wrap_with_schedule`."""
    clouds = _stack(clouds)

    def step(state, step_size):
        new, losses, logits = pgd_step(model, clouds, labels, state, step_size, config.epsilon,
                                       config.normalization, config.random_direction)
        return new

    return step


def _drive(model, clouds, labels, state, steps, advance):
    """Run ``steps`` calls of ``advance`` and collect per-step objective and
    prediction. ``advance(state) -> state``."""
    B = len(clouds)
    trace = np.zeros((B, steps))
    first = np.full(B, -1)
    losses, logits, grads = _evaluate(model, clouds, state, labels)
    wrong = logits.argmax(axis=1) != labels
    first[wrong] = 0
    for t in range(steps):
        state.cached = (losses, logits, grads)
        state = advance(state)
        losses, logits, grads = _evaluate(model, clouds, state, labels)
        trace[:, t] = losses
        wrong = logits.argmax(axis=1) != labels
        first[(first < 0) & wrong] = t + 1
    state.cached = None
    return state, trace, logits, first


def _results(model, clouds, labels, state, trace, first, config):
    # final verdict from a full forward pass over the emitted samples
    adversarial = np.concatenate([clouds, state.delta], axis=1)
    preds = forward_batch(model, adversarial).argmax(axis=1)
    out = []
    for b in range(len(clouds)):
        adv = adversarial[b]
        pred = int(preds[b])
        out.append(AttackResult(
            adversarial=adv,
            delta=state.delta_set(b),
            label=int(labels[b]),
            success=pred != int(labels[b]),
            predicted=pred,
            objective_trace=trace[b],
            final_hausdorff=hausdorff_distance(adv, clouds[b]),
            steps_used=trace.shape[1],
            first_success_step=None if first[b] < 0 else int(first[b]),
            config=config,
        ))
    return out


def run_attack_batch(model, clouds, labels, config, seeds=None):
    """Attack a batch of equal-size clouds; one result per cloud.

    ``seeds`` gives each cloud its own random stream (default: all use
    ``config.seed``). The outcome for a cloud depends only on the cloud, its
    label, its seed and the config.
    """
    clouds = _stack(clouds)
    labels = np.asarray(labels, dtype=np.int64)
    state = initial_state(model, clouds, labels, config, seeds)
    advance = lambda s: attack_step(model, clouds, labels, s, config)
    state, trace, _, first = _drive(model, clouds, labels, state, config.steps, advance)
    return _results(model, clouds, labels, state, trace, first, config)


def run_attack(model, cloud, label, config):
    """Run ``config.steps`` steps of the configured variant on one cloud."""
    return run_attack_batch(model, as_cloud(cloud)[None], [label], config)[0]


def run_scheduled_batch(model, clouds, labels, config, schedule=None, seeds=None):
    """Constant-radius ascent driven through :func:`wrap_with_schedule`.

    With ``schedule=None`` the bare step function is called with the
    constant step size ``config.alpha_init``.
    """
    clouds = _stack(clouds)
    labels = np.asarray(labels, dtype=np.int64)
    state = initial_state(model, clouds, labels, config, seeds)
    state.epsilon_current = config.epsilon
    step = pgd_step_fn(model, clouds, labels, config)
    if schedule is None:
        advance = lambda s: step(s, config.alpha_init)
    else:
        advance = wrap_with_schedule(step, schedule)
    state, trace, _, first = _drive(model, clouds, labels, state, config.steps, advance)
    return _results(model, clouds, labels, state, trace, first, config)


def with_overrides(config, **kw):
    return replace(config, **kw)
