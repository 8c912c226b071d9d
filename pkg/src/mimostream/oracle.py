"""Brute-force discretised MDP oracle for small instances.

Queues are quantised to a uniform grid with a saturating cap, the fading
distribution is replaced by a finite sample set with uniform weights, and
the per-slot action is drawn from a finite catalog of precoder sets built
per channel sample (water-filling products, gradient-weighted WMMSE
solutions, and the all-zero action).  Relative value iteration on this
finite model yields the optimal average cost; evaluating the proposed
controller's policy on the same model measures its optimality gap on
common random numbers.

Only K <= 2 is supported; the state space is exponential in K.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, connected_components

from . import channel, control, valuefn
from .errors import ConfigurationError, NumericalError

LN2 = math.log(2.0)


@dataclass
class DiscreteMdp:
    """Finite queue/channel/action model of the streaming control problem."""

    config: object
    grid: np.ndarray                 # (nq,) queue levels in bits, shared by flows
    channel_samples: np.ndarray      # (S, K, K, Nr, Nt)
    catalog_spec: dict
    action_powers: np.ndarray        # (S, A) total transmit power
    action_rates: np.ndarray         # (S, A, K) per-pair rates (bit/s)
    next_idx: np.ndarray             # (K, nq, S, A) quantised next queue index
    queue_cost: np.ndarray           # (K, nq) per-flow smooth queue cost
    weight_vectors: list = field(default_factory=list)
    weight_action_ids: list = field(default_factory=list)
    actions: np.ndarray | None = None  # (S, A, K, Nt, d) when keep_actions

    @property
    def n_states(self) -> int:
        return len(self.grid) ** self.config.K

    @property
    def n_actions(self) -> int:
        return self.action_powers.shape[1]

    @property
    def n_samples(self) -> int:
        return self.action_powers.shape[0]

    def catalog_hash(self) -> str:
        payload = json.dumps(self.catalog_spec, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def sample_channel_set(config, n_samples: int, seed: int) -> np.ndarray:
    """Common-random-number fading set shared by oracle and policy runs."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 0x0AC1E))))
    return np.stack([channel.sample_channel(rng, config) for _ in range(n_samples)])


def default_catalog_spec(config, model: valuefn.ValueModel | None, grid: np.ndarray,
                         n_waterfill_levels: int = 4) -> dict:
    """Scenario-adapted catalog: proposed-policy weights plus a level grid.

    The weight vectors are the distinct value-gradient vectors over the
    queue grid, so the proposed policy is itself a catalog policy and the
    measured gap is never negative.  Water-filling product actions and the
    all-zero action give the optimiser room to beat it.
    """
    weight_vectors: list[tuple] = []
    if model is not None:
        seen = set()
        for q_tuple in np.ndindex(*([len(grid)] * config.K)):
            q = grid[list(q_tuple)]
            grad = valuefn.value_gradient(model, q)
            if np.all(grad >= 0.0):
                continue
            key = tuple(np.round(grad, 14))
            if key not in seen:
                seen.add(key)
                weight_vectors.append(tuple(float(g) for g in grad))
        lam_levels = sorted({-f.lambda_k * f.w / LN2 for f in model.flows})
    else:
        coeffs = valuefn.sv_coeffs(config.nt, config.nr)
        lam_levels = sorted({
            -valuefn.solve_lambda(coeffs, float(config.L[k, k]), config.bandwidth_hz,
                                  float(config.mu[k])) * config.bandwidth_hz / LN2
            for k in range(config.K)
        })
    base = lam_levels[len(lam_levels) // 2]
    factors = np.geomspace(0.5, 4.0, n_waterfill_levels)
    levels = [0.0] + [float(base * f) for f in factors]
    return {
        "include_zero": True,
        "waterfill_levels": [levels for _ in range(config.K)],
        "weight_vectors": [list(v) for v in weight_vectors],
    }


def _actions_for_sample(H, config, spec, wmmse_opts) -> tuple[list, list]:
    """Materialise the catalog for one channel sample; returns (F list, ids)."""
    K, nt, d = config.K, config.nt, config.d
    actions = []
    ids = []
    if spec.get("include_zero", True):
        actions.append(np.zeros((K, nt, d), dtype=complex))
        ids.append(("zero",))
    level_lists = spec.get("waterfill_levels") or []
    if level_lists:
        if len(level_lists) != K:
            raise ConfigurationError("waterfill_levels must list one level set per pair")
        for combo in np.ndindex(*[len(lv) for lv in level_lists]):
            levels = [level_lists[k][combo[k]] for k in range(K)]
            if all(lv == 0.0 for lv in levels):
                continue
            F = np.zeros((K, nt, d), dtype=complex)
            for k in range(K):
                if levels[k] > 0.0:
                    F[k] = control.single_user_waterfill(
                        H[k, k], float(config.L[k, k]), levels[k]
                    )
            actions.append(F)
            ids.append(("waterfill",) + tuple(combo))
    for wi, grad in enumerate(spec.get("weight_vectors") or []):
        decision = control.wmmse_solve(H, config, np.asarray(grad, dtype=float),
                                       wmmse_opts)
        actions.append(decision.F)
        ids.append(("wmmse", wi))
    return actions, ids


def build_discrete_mdp(config, grid_points: int, channel_samples: np.ndarray,
                       catalog_spec: dict,
                       wmmse_opts: control.WmmseOptions | None = None,
                       budget: float = 2e8, keep_actions: bool = False) -> DiscreteMdp:
    """Enumerate states, actions, per-stage costs and quantised transitions."""
    if config.K > 2:
        raise ConfigurationError("oracle supports K <= 2 (state space is exponential)")
    wmmse_opts = wmmse_opts or control.WmmseOptions()
    grid = np.linspace(0.0, 3.0 * config.q_high, grid_points)
    step = grid[1] - grid[0]
    if step >= 2.0 * float(np.min(config.mu)) * config.slot_s:
        raise ConfigurationError(
            "queue grid too coarse: the playback drain would round back onto "
            "the same cell; increase grid_points"
        )
    n_samples = len(channel_samples)

    powers = []
    rates = []
    kept = []
    ids0 = None
    wmmse_ids = []
    for H in channel_samples:
        actions, ids = _actions_for_sample(H, config, catalog_spec, wmmse_opts)
        if ids0 is None:
            ids0 = ids
            wmmse_ids = [i for i, tag in enumerate(ids) if tag[0] == "wmmse"]
        powers.append([float(np.sum(np.abs(F) ** 2)) for F in actions])
        row = []
        for F in actions:
            _, r = kernels_rates(H, config, F)
            row.append(r)
        rates.append(row)
        if keep_actions:
            kept.append(np.stack(actions))
    action_powers = np.asarray(powers)
    action_rates = np.asarray(rates)
    n_actions = action_powers.shape[1]
    size = grid_points ** config.K * n_samples * n_actions
    if size > budget:
        raise ConfigurationError(
            f"discrete MDP size {size:.3g} exceeds budget {budget:.3g}; "
            f"shrink the grid, sample set or catalog"
        )

    drained = np.maximum(grid[None, :] - config.mu[:, None] * config.slot_s, 0.0)
    next_idx = np.empty((config.K, grid_points, n_samples, n_actions), dtype=np.int32)
    for k in range(config.K):
        nxt = drained[k][:, None, None] + action_rates[None, :, :, k] * config.slot_s
        next_idx[k] = np.clip(np.rint(nxt / step), 0, grid_points - 1).astype(np.int32)

    q_cost = np.stack([
        valuefn.queue_cost(config.gamma[k], config.beta[k], config.eta,
                           config.q_low, config.q_high, grid)
        for k in range(config.K)
    ])
    return DiscreteMdp(
        config=config, grid=grid, channel_samples=channel_samples,
        catalog_spec=catalog_spec, action_powers=action_powers,
        action_rates=action_rates, next_idx=next_idx, queue_cost=q_cost,
        weight_vectors=[np.asarray(v) for v in catalog_spec.get("weight_vectors") or []],
        weight_action_ids=wmmse_ids,
        actions=np.stack(kept) if keep_actions else None,
    )


def kernels_rates(H, config, F):
    """Per-pair MMSE rates for a fixed precoder set (bit/s)."""
    from . import kernels

    if kernels.HAVE_NUMBA and config.zeta == 1.0:
        U, r_l2 = kernels.mmse_rates(np.ascontiguousarray(H), config.L,
                                     np.ascontiguousarray(F), config.zeta)
        return U, config.bandwidth_hz * r_l2
    U = channel.mmse_receivers(H, config, F)
    r = np.array([channel.rate(H, config, F, U[k], k) for k in range(config.K)])
    return U, r


def _bellman_apply(mdp: DiscreteMdp, v: np.ndarray, greedy: bool = False):
    """One synchronous Bellman sweep; optionally returns the greedy policy.

    Streams over channel samples to keep memory at O(n_states * n_actions).
    """
    k_pairs = mdp.config.K
    nq = len(mdp.grid)
    n_s = mdp.n_samples
    if k_pairs == 1:
        state_cost = mdp.queue_cost[0]
        tv = np.zeros(nq)
        pol = np.zeros((nq, n_s), dtype=np.int32) if greedy else None
        for s in range(n_s):
            vals = v[mdp.next_idx[0][:, s, :]] + mdp.action_powers[s][None, :]
            if greedy:
                pol[:, s] = np.argmin(vals, axis=1)
                tv += vals[np.arange(nq), pol[:, s]]
            else:
                tv += vals.min(axis=1)
        tv = tv / n_s + state_cost
        return tv, pol
    state_cost = mdp.queue_cost[0][:, None] + mdp.queue_cost[1][None, :]
    tv = np.zeros((nq, nq))
    pol = np.zeros((nq, nq, n_s), dtype=np.int32) if greedy else None
    for s in range(n_s):
        ix1 = mdp.next_idx[0][:, s, :]      # (nq, A)
        ix2 = mdp.next_idx[1][:, s, :]
        vals = v[ix1[:, None, :], ix2[None, :, :]] + mdp.action_powers[s][None, None, :]
        if greedy:
            choice = np.argmin(vals, axis=2)
            pol[:, :, s] = choice
            tv += np.take_along_axis(vals, choice[:, :, None], axis=2)[:, :, 0]
        else:
            tv += vals.min(axis=2)
    tv = tv / n_s + state_cost
    return tv, pol


def relative_value_iteration(mdp: DiscreteMdp, tol: float = 1e-9,
                             max_sweeps: int = 20000, damping: float = 0.5):
    """Average-cost relative VI; returns (theta, V, info).

    theta is the per-slot average of the Problem-1 stage cost; the span of
    the undamped Bellman residual brackets it to within tol.  The damped
    update (Schweitzer's aperiodicity transform) keeps the span contracting
    even when the optimal chain is periodic, which coarse grids with few
    fading samples readily produce.
    """
    shape = (len(mdp.grid),) * mdp.config.K
    v = np.zeros(shape)
    ref = (0,) * mdp.config.K
    theta = math.nan
    for sweep in range(1, max_sweeps + 1):
        tv, _ = _bellman_apply(mdp, v)
        delta = tv - v
        lo, hi = float(delta.min()), float(delta.max())
        theta = 0.5 * (lo + hi)
        if hi - lo < tol * max(1.0, abs(theta)):
            v = tv - tv[ref]
            return theta, v, {"sweeps": sweep, "span": hi - lo}
        v = v + damping * delta
        v = v - v[ref]
    raise NumericalError(
        f"relative value iteration did not converge in {max_sweeps} sweeps "
        f"(span {hi - lo:.3g})"
    )


def greedy_policy(mdp: DiscreteMdp, v: np.ndarray) -> np.ndarray:
    """Per-(state, sample) minimiser of the Bellman right-hand side."""
    _, pol = _bellman_apply(mdp, v, greedy=True)
    return pol


def proposed_policy(mdp: DiscreteMdp, model: valuefn.ValueModel) -> np.ndarray:
    """Project the gradient-weighted controller onto the catalog.

    Requires the catalog to have been built with the model's distinct
    gradient vectors (default_catalog_spec does this), so the projection is
    exact and the resulting average cost can never beat the oracle.
    """
    nq = len(mdp.grid)
    k_pairs = mdp.config.K
    lookup = {
        tuple(np.round(np.asarray(vec), 14)): mdp.weight_action_ids[i]
        for i, vec in enumerate(mdp.weight_vectors)
    }
    zero_id = 0 if mdp.catalog_spec.get("include_zero", True) else None
    shape = (nq,) * k_pairs + (mdp.n_samples,)
    pol = np.zeros(shape, dtype=np.int32)
    for q_tuple in np.ndindex(*([nq] * k_pairs)):
        grad = valuefn.value_gradient(model, mdp.grid[list(q_tuple)])
        if np.all(grad >= 0.0):
            if zero_id is None:
                raise ConfigurationError("catalog lacks the all-zero action")
            pol[q_tuple] = zero_id
            continue
        key = tuple(np.round(grad, 14))
        if key not in lookup:
            raise ConfigurationError(
                "catalog was not built from this model's gradient vectors"
            )
        pol[q_tuple] = lookup[key]
    return pol


def evaluate_policy(mdp: DiscreteMdp, policy: np.ndarray) -> float:
    """Exact long-run average cost of the chain induced by ``policy``.

    Solves the stationary distribution of the single terminal communicating
    class; falls back to a long deterministic chain simulation with a
    warning if the chain has several terminal classes.
    """
    k_pairs = mdp.config.K
    nq = len(mdp.grid)
    n_states = nq ** k_pairs
    n_s = mdp.n_samples
    states = np.arange(n_states)
    if k_pairs == 1:
        q1 = states
        cost = mdp.queue_cost[0].copy()
        nxt = np.empty((n_states, n_s), dtype=np.int64)
        for s in range(n_s):
            a = policy[:, s]
            nxt[:, s] = mdp.next_idx[0][q1, s, a]
            cost += mdp.action_powers[s][a] / n_s
    else:
        q1, q2 = np.divmod(states, nq)
        cost = mdp.queue_cost[0][q1] + mdp.queue_cost[1][q2]
        nxt = np.empty((n_states, n_s), dtype=np.int64)
        for s in range(n_s):
            a = policy[q1, q2, s]
            n1 = mdp.next_idx[0][q1, s, a]
            n2 = mdp.next_idx[1][q2, s, a]
            nxt[:, s] = n1 * nq + n2
            cost += mdp.action_powers[s][a] / n_s
    rows = np.repeat(states, n_s)
    cols = nxt.ravel()
    probs = np.full(rows.shape, 1.0 / n_s)
    chain = sp.csr_matrix((probs, (rows, cols)), shape=(n_states, n_states))
    chain.sum_duplicates()

    # restrict to states reachable from the canonical start (the quantised
    # per-flow target queue); unreachable states never influence the episode
    step = mdp.grid[1] - mdp.grid[0]
    q0 = int(np.clip(np.rint(
        valuefn.q_star(mdp.config.gamma[0], mdp.config.beta[0], mdp.config.eta,
                       mdp.config.q_low, mdp.config.q_high) / step), 0, nq - 1))
    start = q0 if k_pairs == 1 else q0 * nq + q0
    reach = np.sort(breadth_first_order(chain, start, return_predecessors=False))
    chain = chain[reach][:, reach]
    cost = cost[reach]
    start_local = int(np.searchsorted(reach, start))

    n_comp, labels = connected_components(chain, directed=True, connection="strong")
    # terminal classes: strongly connected components with no outgoing edge
    outgoing = np.zeros(n_comp, dtype=bool)
    coo = chain.tocoo()
    mask = labels[coo.row] != labels[coo.col]
    outgoing[labels[coo.row[mask]]] = True
    terminal = np.flatnonzero(~outgoing)
    if len(terminal) != 1:
        warnings.warn(
            f"induced chain has {len(terminal)} reachable terminal classes; "
            f"falling back to a trajectory estimate"
        )
        local_nxt = np.searchsorted(reach, nxt[reach])
        return _simulate_chain(local_nxt, cost, start_local, horizon=400000)
    members = np.flatnonzero(labels == terminal[0])
    sub = chain[members][:, members].T.tolil()
    n_sub = len(members)
    a_mat = (sub - sp.eye(n_sub)).tolil()
    a_mat[0, :] = 1.0
    b = np.zeros(n_sub)
    b[0] = 1.0
    pi = sp.linalg.spsolve(a_mat.tocsc(), b)
    pi = np.maximum(pi, 0.0)
    pi /= pi.sum()
    return float(pi @ cost[members])


def _simulate_chain(nxt, cost, start: int, horizon: int) -> float:
    state = start
    acc = 0.0
    n_s = nxt.shape[1]
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(0xC4A1)))
    draws = rng.integers(0, n_s, size=horizon)
    for t in range(horizon):
        acc += cost[state]
        state = nxt[state, draws[t]]
    return acc / horizon


class OraclePolicyController:
    """Replay a discrete-oracle policy inside the slot simulator.

    The fading comes from the oracle's own finite sample set (the slot rng
    picks one uniformly), so the simulated chain is exactly the discretised
    model the policy was solved on, up to queue quantisation.  Requires an
    MDP built with keep_actions=True.
    """

    name = "oracle-policy"

    def __init__(self, mdp: DiscreteMdp, policy: np.ndarray):
        if mdp.actions is None:
            raise ConfigurationError(
                "oracle-policy controller needs an MDP built with keep_actions=True"
            )
        self.mdp = mdp
        self.policy = policy
        self._idx = 0
        self._step = mdp.grid[1] - mdp.grid[0]

    def sample_channel(self, rng) -> np.ndarray:
        self._idx = int(rng.integers(self.mdp.n_samples))
        return self.mdp.channel_samples[self._idx]

    def decide(self, H, q):
        nq = len(self.mdp.grid)
        qi = np.clip(np.rint(np.asarray(q) / self._step), 0, nq - 1).astype(int)
        action = int(self.policy[tuple(qi) + (self._idx,)])
        F = self.mdp.actions[self._idx, action]
        U = channel.mmse_receivers(H, self.mdp.config, F)
        active = np.flatnonzero([np.any(F[k]) for k in range(self.mdp.config.K)])
        return control.SlotDecision(
            F=F, U=U, active=active,
            rates=self.mdp.action_rates[self._idx, action].copy(),
        )


def oracle_report(config, model: valuefn.ValueModel | None, grid_points: int,
                  n_samples: int, seed: int,
                  catalog_spec: dict | None = None,
                  wmmse_opts: control.WmmseOptions | None = None,
                  vi_tol: float = 1e-8, max_sweeps: int = 20000) -> dict:
    """theta* vs the proposed policy's average cost on one discretisation."""
    samples = sample_channel_set(config, n_samples, seed)
    grid = np.linspace(0.0, 3.0 * config.q_high, grid_points)
    if model is None:
        model = valuefn.build_value_model(config)
    spec = catalog_spec or default_catalog_spec(config, model, grid)
    mdp = build_discrete_mdp(config, grid_points, samples, spec, wmmse_opts)
    theta_star, v, info = relative_value_iteration(mdp, tol=vi_tol,
                                                   max_sweeps=max_sweeps)
    pol = proposed_policy(mdp, model)
    theta_tilde = evaluate_policy(mdp, pol)
    return {
        "theta_star": theta_star,
        "theta_proposed": theta_tilde,
        "gap": theta_tilde - theta_star,
        "grid_points": grid_points,
        "n_channel_samples": n_samples,
        "n_actions": mdp.n_actions,
        "catalog_hash": mdp.catalog_hash(),
        "vi_sweeps": info["sweeps"],
        "vi_span": info["span"],
    }
