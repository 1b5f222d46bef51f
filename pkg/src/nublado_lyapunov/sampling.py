import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from nublado_lyapunov.chain import State, potential_energy
from nublado_lyapunov.conf.app_settings import app_settings
from nublado_lyapunov.potentials import TWO_PI

logger = logging.getLogger(__name__)

KINETIC_SPLITS = ("simplex", "sphere", "fast")


def log_uniform(rng, lo, hi, size):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


def energy_tiers(h_lo, h_hi, per_decade=None):
    """
    Edges of log-spaced energy tiers covering [h_lo, h_hi].
    """
    if not 0 < h_lo < h_hi:
        raise ValueError(f"Invalid energy range [{h_lo!r}, {h_hi!r}].")
    per_decade = per_decade or app_settings.TIERS_PER_DECADE
    count = max(1, int(np.ceil(per_decade * np.log10(h_hi / h_lo) - 1e-9)))
    return np.geomspace(h_lo, h_hi, count + 1)


def tiered_energies(rng, edges, total):
    """
    About total/len(tiers) log-uniform energies per tier.

    Returns:
        (energies, tier_index) arrays.
    """
    tiers = len(edges) - 1
    per_tier = max(1, total // tiers)
    energies = np.concatenate([log_uniform(rng, edges[t], edges[t + 1], per_tier) for t in range(tiers)])
    index = np.repeat(np.arange(tiers), per_tier)
    return energies, index


def uniform_torus(rng, N, size):
    return rng.uniform(0.0, TWO_PI, (N, size))


def split_kinetic(rng, kinetic, N, split="simplex", fast_index=None):
    """
    Momenta with total kinetic energy `kinetic` (one value per column).

    Args:
        split: "simplex" splits the energy uniformly at random across particles,
            "sphere" draws p uniformly on the momentum sphere, "fast" puts all
            of it on particle `fast_index` (default N).
    """
    kinetic = np.asarray(kinetic, dtype=float)
    size = kinetic.shape[0]
    if split == "sphere":
        g = rng.standard_normal((N, size))
        return np.sqrt(2.0 * kinetic) * g / np.linalg.norm(g, axis=0)
    if split == "simplex":
        weights = rng.dirichlet(np.ones(N), size).T
        signs = rng.choice((-1.0, 1.0), (N, size))
        return signs * np.sqrt(2.0 * kinetic * weights)
    if split == "fast":
        index = (fast_index or N) - 1
        p = np.zeros((N, size))
        p[index] = rng.choice((-1.0, 1.0), size) * np.sqrt(2.0 * kinetic)
        return p
    raise ValueError(f"Unknown kinetic split {split!r}; expected one of {KINETIC_SPLITS}.")


def states_at_energy(spec, energies, rng, *, q_sampler=None, split="simplex", fast_index=None, max_tries=100):
    """
    States with H = energies exactly: coordinates from `q_sampler`, the
    remaining energy assigned as kinetic energy.

    Coordinates whose potential energy exceeds the target are redrawn.

    Raises:
        ValueError: Some target stays below the sampled potential energies.
    """
    energies = np.asarray(energies, dtype=float)
    size = energies.shape[0]
    N = spec.N
    if q_sampler is None:
        q_sampler = lambda rng, n: uniform_torus(rng, N, n)  # noqa: E731
    q = q_sampler(rng, size)
    potential = potential_energy(spec, State(p=np.zeros_like(q), q=q))
    for _ in range(max_tries):
        bad = potential > energies
        if not np.any(bad):
            break
        q[:, bad] = q_sampler(rng, int(np.sum(bad)))
        potential = potential_energy(spec, State(p=np.zeros_like(q), q=q))
    else:
        raise ValueError("Target energies lie below the potential energy of every sampled configuration.")
    p = split_kinetic(rng, energies - potential, N, split=split, fast_index=fast_index)
    return State.of(spec, p, q)


def chunks(size, threads):
    bounds = np.linspace(0, size, max(1, threads) + 1).astype(int)
    return [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def map_batched(func, s, *, threads=None):
    """
    Apply `func` to slices of a batched State, in a thread pool when threads > 1.

    `func` returns an array (or tuple of arrays) along the batch axis; the
    results are concatenated in order.
    """
    threads = threads or app_settings.THREADS
    size = s.batch_shape[0]
    parts = [State(p=s.p[:, part], q=s.q[:, part]) for part in chunks(size, threads)]
    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(func, parts))
    else:
        results = [func(part) for part in parts]
    if isinstance(results[0], tuple):
        return tuple(np.concatenate(values, axis=-1) for values in zip(*results))
    return np.concatenate(results, axis=-1)
