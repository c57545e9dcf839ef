"""Core data records shared across the toolkit."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class PersonRecord:
    """One survey respondent.

    ``weight`` is the person-level survey weight, ``poor`` the binary
    poverty status (1 = poor), and ``scores`` the K dimensional scores
    in [0, 1].  All persons of a household share the same status, and
    non-poor persons carry all-zero scores; :func:`validate_persons`
    enforces both.
    """

    area_id: str
    psu_id: str
    household_id: str
    person_id: str
    weight: float
    poor: int
    scores: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError(f"person {self.person_id}: weight must be > 0")
        if self.poor not in (0, 1):
            raise ValueError(f"person {self.person_id}: poor must be 0 or 1")


@dataclass(frozen=True)
class DesignEffects:
    """Pooled design quantities computed once from the entire dataset.

    ``deff_pairs[k, l]`` is the design effect of the summed variable
    ``score_k + score_l`` (diagonal equals ``deff_dims``); it feeds the
    covariance-smoothing identity together with ``pooled_s_pairs``, the
    pooled variances of the pairwise sums over poor respondents.
    """

    deff_poverty: float
    pooled_p: float
    deff_dims: np.ndarray       # (K,)
    pooled_s: np.ndarray        # (K,) pooled score variances, poor only
    pooled_s_pairs: np.ndarray  # (K, K) pooled variances of score_k + score_l
    deff_pairs: np.ndarray      # (K, K) design effects of the summed scores

    def __post_init__(self):
        if not (self.deff_poverty > 0 and np.all(self.deff_dims > 0)):
            raise ValueError("design effects must be positive")
        if not 0.0 < self.pooled_p < 1.0:
            raise ValueError("pooled proportion must lie strictly in (0, 1)")
        if np.any(self.pooled_s < 0):
            raise ValueError("pooled variances must be nonnegative")

    @property
    def n_dims(self) -> int:
        return len(self.deff_dims)


@dataclass
class AreaDesignSummary:
    """Design-based quantities for one small area.

    ``y_direct`` and ``sigma_hat`` are ``None`` for areas with zero poor
    respondents; such areas enter the multivariate model through the
    linking level only.
    """

    area_id: str
    n_households: int
    n_adjusted: float
    z_direct: float
    z_direct_se: float
    D_smoothed: float
    single_psu: bool = False
    y_direct: np.ndarray | None = None      # (K,)
    sigma_hat: np.ndarray | None = None     # (K, K)

    def __post_init__(self):
        if self.n_adjusted > self.n_households + 1e-9:
            raise ValueError(
                f"area {self.area_id}: adjusted size {self.n_adjusted} exceeds "
                f"household count {self.n_households}"
            )
        if self.sigma_hat is not None:
            if not np.allclose(self.sigma_hat, self.sigma_hat.T):
                raise ValueError(f"area {self.area_id}: sigma_hat not symmetric")
            if np.any(np.diag(self.sigma_hat) <= 0):
                raise ValueError(f"area {self.area_id}: sigma_hat diagonal not positive")


@dataclass
class AreaRecord:
    """One row of the areas table: identifiers, census population, covariates."""

    area_id: str
    district_id: str
    population: float
    covariates: dict[str, float] = field(default_factory=dict)


def validate_persons(persons: list[PersonRecord]) -> int:
    """Check cross-record invariants and return the score dimension K.

    Raises ``ValueError`` when households mix poverty statuses, when a
    non-poor person has a nonzero score, or when score lengths differ.
    """
    if not persons:
        raise ValueError("empty person list")
    k = len(persons[0].scores)
    status: dict[tuple[str, str], int] = {}
    for p in persons:
        if len(p.scores) != k:
            raise ValueError(f"person {p.person_id}: expected {k} scores, got {len(p.scores)}")
        key = (p.area_id, p.household_id)
        prev = status.setdefault(key, p.poor)
        if prev != p.poor:
            raise ValueError(f"household {p.household_id} in area {p.area_id} mixes poverty statuses")
        if p.poor == 0 and any(s != 0.0 for s in p.scores):
            raise ValueError(f"person {p.person_id}: non-poor person with nonzero scores")
        if p.poor == 1 and any(not 0.0 <= s <= 1.0 for s in p.scores):
            raise ValueError(f"person {p.person_id}: scores must lie in [0, 1]")
    return k
