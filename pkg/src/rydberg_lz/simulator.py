"""Synthetic shot generator with known ground truth.

Each shot draws a gas density (log-normal around the configured mean), a
Poisson number of atoms in the fixed volume, the pair-transition outcome,
an optional sweep-independent black-body transfer into the np state and
finally the two gated detector signals with Polya-like gain noise.

Transition modes, from cheapest to most literal:

``expected``  infinite-sample limit, n_np = ½ N ⟨P⟩ (no counting noise)
``binomial``  n_np ~ Binomial(N//2, ⟨P⟩), the exact law of the pair trials
``erlang``    one Erlang-distributed separation and one Bernoulli trial per pair
``spatial``   explicit positions in a periodic box, greedy nearest-neighbour
              pairing and the anisotropic per-pair probability
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .calibration import REFERENCE_LINEAR_G0, ConversionModel, h_eval
from .dataset import GroundTruth, ShotData
from .noise import REFERENCE_ALPHA, REFERENCE_BETA_EFF, NoiseModel
from .physics import (CM3_TO_UM3, ChannelSet, PairPhysics, SweepSpec, default_channel_set,
                      p_lz_aggregate)

__all__ = [
    "MODES",
    "SimConfig",
    "TransitionOutcome",
    "default_sweep_grid",
    "shot_rng",
    "sample_nn_distance",
    "sample_directions",
    "spatial_realization",
    "greedy_pairs",
    "apply_transitions",
    "detect",
    "generate_dataset",
]

MODES = ("expected", "binomial", "erlang", "spatial")
CM_TO_UM = 1e4


def default_sweep_grid(n: int = 8) -> tuple[float, ...]:
    """Geometric grid across the experimental 0.6 to 7.8 V/cm/µs range."""
    return tuple(float(x) for x in np.geomspace(0.6, 7.8, n))


@dataclass(frozen=True)
class SimConfig:
    mean_density: float = 4.15e7          # cm⁻³
    density_jitter_rel: float = 0.3       # σ of ln η
    volume: float = 2.4e-4                # cm³, about 1e4 atoms at the mean density
    sweep_grid: tuple[float, ...] = field(default_factory=default_sweep_grid)
    n_shots: int = 1000
    mode: str = "binomial"
    detection: ConversionModel = field(default_factory=lambda: ConversionModel.linear(REFERENCE_LINEAR_G0))
    noise: NoiseModel | None = field(default_factory=lambda: NoiseModel(REFERENCE_ALPHA, REFERENCE_BETA_EFF))
    bbr_fraction: float = 0.0
    seed: int = 0
    sweep_enabled: bool = True
    physics: PairPhysics = field(default_factory=PairPhysics)

    def __post_init__(self):
        object.__setattr__(self, "sweep_grid", tuple(float(x) for x in self.sweep_grid))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.mean_density > 0:
            raise ValueError("mean_density must be > 0")
        if not self.density_jitter_rel >= 0:
            raise ValueError("density_jitter_rel must be >= 0")
        if not self.volume > 0:
            raise ValueError("volume must be > 0")
        if self.n_shots < 0:
            raise ValueError("n_shots must be >= 0")
        if not self.sweep_grid or any(not f > 0 for f in self.sweep_grid):
            raise ValueError("sweep_grid must be a non-empty list of positive slew rates")
        if not 0.0 <= self.bbr_fraction < 1.0:
            raise ValueError("bbr_fraction must lie in [0, 1)")

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)


def shot_rng(seed: int, shot_id: int) -> np.random.Generator:
    """Independent stream per shot, so shots can be generated in any order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(shot_id)]))


# ---------------------------------------------------------------------------
# Gas geometry
# ---------------------------------------------------------------------------

def sample_nn_distance(eta: float, rng: np.random.Generator | None = None, size=None, *, u=None):
    """Nearest-neighbour distances (µm) by inverting 1 - exp(-(4π/3)ηr³).

    ``u`` may be supplied directly (uniform variates in (0, 1]) for a
    deterministic draw; otherwise it comes from ``rng``.
    """
    if not eta > 0:
        raise ValueError("density must be > 0")
    if u is None:
        if rng is None:
            raise ValueError("need an rng or explicit uniforms")
        u = 1.0 - rng.random(size)  # (0, 1]
    u = np.asarray(u, dtype=float)
    eta_um = eta * CM3_TO_UM3
    r = np.cbrt(-np.log(u) / (4.0 * math.pi / 3.0 * eta_um))
    return float(r) if r.ndim == 0 else r


def sample_directions(rng: np.random.Generator, size: int) -> np.ndarray:
    """Polar angles of isotropically distributed directions."""
    return np.arccos(rng.uniform(-1.0, 1.0, size))


def spatial_realization(eta: float, box_side: float, rng: np.random.Generator) -> np.ndarray:
    """Poisson number of uniform positions (µm) in a cubic box of side ``box_side`` µm."""
    mean = eta * CM3_TO_UM3 * box_side ** 3
    if not mean >= 2:
        raise ValueError(f"expected atom count {mean:.3g} in the box is below 2")
    n = rng.poisson(mean)
    return rng.random((n, 3)) * box_side


def greedy_pairs(positions: np.ndarray, box_side: float, k: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint pairs chosen greedily by increasing periodic separation.

    Candidate partners are each atom's ``k`` nearest neighbours. Returns
    (pairs as an (m, 2) index array, separation vectors (m, 3) in µm).
    """
    n = len(positions)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64), np.zeros((0, 3))
    k = min(k, n - 1)
    tree = cKDTree(positions, boxsize=box_side)
    dist, idx = tree.query(positions, k=k + 1)
    i = np.repeat(np.arange(n), k)
    j = idx[:, 1:].ravel()
    ok = j < n  # cKDTree pads missing neighbours with index n
    i, j = i[ok], j[ok]
    # An undirected edge shows up once or twice in the k-NN lists.
    edges = np.unique(np.stack([np.minimum(i, j), np.maximum(i, j)], axis=1), axis=0)
    sep = positions[edges[:, 1]] - positions[edges[:, 0]]
    sep -= box_side * np.round(sep / box_side)
    dd = np.sqrt(np.einsum("ij,ij->i", sep, sep))
    order = np.lexsort((edges[:, 1], edges[:, 0], dd))
    used = np.zeros(n, dtype=bool)
    chosen = []
    for e in order:
        a, b = edges[e]
        if not used[a] and not used[b]:
            used[a] = used[b] = True
            chosen.append(e)
    chosen = np.array(chosen, dtype=np.int64)
    return edges[chosen], sep[chosen]


# ---------------------------------------------------------------------------
# Transitions and detection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransitionOutcome:
    n_atoms: float
    n_s: float      # atoms left in the initial state
    n_np: float     # np atoms from pair transitions
    n_pm1: float    # (n-1)p partners, one per transition
    n_pairs: float  # pairs that underwent a trial

    @property
    def fraction(self) -> float:
        """Fraction of atoms that took part in a transition."""
        return 2.0 * self.n_np / self.n_atoms if self.n_atoms else 0.0


def apply_transitions(
    source,
    sweep: SweepSpec,
    channels: ChannelSet | None,
    rng: np.random.Generator | None,
    mode: str,
    *,
    n_atoms: int | None = None,
    eta: float | None = None,
    box_side: float | None = None,
    physics: PairPhysics | None = None,
) -> TransitionOutcome:
    """Pair transitions for one shot.

    ``source`` is, by mode:
      erlang   pair separations in µm (one per pair), ``n_atoms`` optional
      spatial  atom positions in µm, with ``box_side``
      binomial/expected  atom count, with ``eta`` in cm⁻³
    """
    if mode == "erlang":
        r = np.asarray(source, dtype=float)
        theta = sample_directions(rng, r.size)
        p = p_lz_aggregate(sweep, r, theta, channels)
        n_np = int(np.count_nonzero(rng.random(r.size) < p))
        n = 2 * r.size if n_atoms is None else int(n_atoms)
        return TransitionOutcome(n, n - 2 * n_np, n_np, n_np, r.size)
    if mode == "spatial":
        pos = np.asarray(source, dtype=float)
        pairs, sep = greedy_pairs(pos, box_side)
        r = np.sqrt(np.einsum("ij,ij->i", sep, sep))
        theta = np.arccos(np.clip(sep[:, 2] / np.where(r > 0, r, 1.0), -1.0, 1.0))
        p = p_lz_aggregate(sweep, r, theta, channels) if r.size else np.zeros(0)
        n_np = int(np.count_nonzero(rng.random(r.size) < p))
        n = len(pos)
        return TransitionOutcome(n, n - 2 * n_np, n_np, n_np, len(pairs))
    if mode in ("binomial", "expected"):
        if physics is None:
            physics = PairPhysics(r0_ref=sweep.r0_ref, f_prime_ref=sweep.f_prime_ref,
                                  channels=default_channel_set() if channels is None else channels)
        n = source
        p = physics.expected_transition(eta, sweep.f_prime) if n > 0 else 0.0
        if mode == "expected":
            n_np = 0.5 * n * p
            return TransitionOutcome(n, n - 2 * n_np, n_np, n_np, 0.5 * n)
        n_pairs = int(n) // 2
        n_np = int(rng.binomial(n_pairs, p))
        return TransitionOutcome(int(n), int(n) - 2 * n_np, n_np, n_np, n_pairs)
    raise ValueError(f"unknown mode {mode!r}")


def detect(n_np: float, n_rest: float, volume: float, detection: ConversionModel,
           noise: NoiseModel | None, rng: np.random.Generator | None) -> tuple[float, float]:
    """Gated signals (S^np, S^R) in nV·s for the given atom counts.

    Mean signals follow the conversion h: the total gate sees h(N/V), the np
    gate h(n_np/V), and the rest gate the difference, so h(S) stays exact
    for the total. With ``noise`` each gate is drawn from a Gamma law with
    that mean and relative variance (β_eff + 1/S)/α².
    """
    if n_np < 0 or n_rest < 0:
        raise ValueError("counts must be >= 0")
    s_t = float(h_eval(detection, (n_np + n_rest) / volume))
    s_np = float(h_eval(detection, n_np / volume))
    s_r = max(s_t - s_np, 0.0)
    if noise is None:
        return s_np, s_r
    return _gamma_draw(s_np, noise, rng), _gamma_draw(s_r, noise, rng)


def _gamma_draw(mean: float, noise: NoiseModel, rng: np.random.Generator) -> float:
    if mean <= 0:
        return 0.0
    v = float(noise.relative_variance(mean))
    return float(rng.gamma(1.0 / v, mean * v))


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def _shot_density(cfg: SimConfig, rng: np.random.Generator) -> float:
    s = cfg.density_jitter_rel
    # Median shifted so that the mean density equals the configured value.
    return cfg.mean_density * math.exp(s * rng.standard_normal() - 0.5 * s * s) if s > 0 else cfg.mean_density


def generate_dataset(cfg: SimConfig) -> tuple[ShotData, GroundTruth]:
    """Synthesise ``cfg.n_shots`` shots; deterministic in ``cfg.seed``.

    Slew rates cycle through ``sweep_grid`` by shot id. With
    ``sweep_enabled=False`` no pair transitions happen and F' is recorded
    as 0, which is the baseline used by black-body correction.
    """
    n = cfg.n_shots
    ids = np.arange(n, dtype=np.int64)
    grid = np.asarray(cfg.sweep_grid)
    fp = grid[ids % grid.size] if cfg.sweep_enabled else np.zeros(n)
    physics = cfg.physics
    rngs = [shot_rng(cfg.seed, i) for i in ids]

    eta_draw = np.array([_shot_density(cfg, g) for g in rngs]) if n else np.zeros(0)
    box_side = cfg.volume ** (1.0 / 3.0) * CM_TO_UM
    positions: list = [None] * n
    if cfg.mode == "expected":
        counts = eta_draw * cfg.volume
    elif cfg.mode == "spatial":
        for i in range(n):
            positions[i] = spatial_realization(eta_draw[i], box_side, rngs[i])
        counts = np.array([len(p) for p in positions], dtype=float)
    else:
        counts = np.array([float(g.poisson(e * cfg.volume)) for g, e in zip(rngs, eta_draw)])
    eta_real = counts / cfg.volume

    # Mean transition probability per shot, vectorised over the dataset.
    p_mean = np.zeros(n)
    if cfg.sweep_enabled and cfg.mode in ("binomial", "expected"):
        for f in np.unique(fp):
            m = (fp == f) & (eta_real > 0)
            if np.any(m):
                p_mean[m] = physics.expected_transition(eta_real[m], f)

    s_np = np.zeros(n)
    s_r = np.zeros(n)
    for i in range(n):
        g = rngs[i]
        N = counts[i]
        if not cfg.sweep_enabled or N == 0:
            out = TransitionOutcome(N, N, 0.0, 0.0, 0.0)
        elif cfg.mode == "expected":
            out = TransitionOutcome(N, N * (1 - p_mean[i]), 0.5 * N * p_mean[i],
                                    0.5 * N * p_mean[i], 0.5 * N)
        elif cfg.mode == "binomial":
            pairs = int(N) // 2
            k = int(g.binomial(pairs, p_mean[i]))
            out = TransitionOutcome(N, N - 2 * k, k, k, pairs)
        elif cfg.mode == "erlang":
            pairs = int(N) // 2
            r = sample_nn_distance(eta_real[i], g, pairs) if pairs else np.zeros(0)
            out = apply_transitions(r, physics.sweep(fp[i]), physics.channels, g, "erlang",
                                    n_atoms=int(N))
        else:
            out = apply_transitions(positions[i], physics.sweep(fp[i]), physics.channels, g,
                                    "spatial", box_side=box_side)
        # Sweep-independent transfer of remaining ground-state atoms.
        if cfg.bbr_fraction > 0 and out.n_s > 0:
            n_bbr = out.n_s * cfg.bbr_fraction if cfg.mode == "expected" \
                else float(g.binomial(int(out.n_s), cfg.bbr_fraction))
        else:
            n_bbr = 0.0
        n_np_gate = out.n_np + n_bbr
        n_rest = out.n_s - n_bbr + out.n_pm1
        assert abs(n_np_gate + n_rest - N) <= 1e-9 * max(N, 1.0)
        s_np[i], s_r[i] = detect(n_np_gate, n_rest, cfg.volume, cfg.detection, cfg.noise, g)

    data = ShotData(ids, fp, s_np, s_r)
    truth = GroundTruth(ids.copy(), eta_real, np.full(n, cfg.volume))
    return data, truth
