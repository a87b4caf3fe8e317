"""Coagulation kernel families, the additive majorant and cut-off kernels.

All families merge deterministically, y = x1 + x2, and use the mass
functional E(x) = x.  The families only differ in their intensity
K(x1, x2):

=================  ==========================================
``constant``       K = c
``additive``       K = C (x + y)
``product_sqrt``   K = C (1 + sqrt(x)) (1 + sqrt(y))
``smooth``         built-in non-decreasing C^2 kernels with
                   bounded derivatives (see ``SMOOTH_KERNELS``)
=================  ==========================================
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

FAMILIES = ("constant", "additive", "product_sqrt", "smooth")
SMOOTH_KERNELS = ("constant", "additive", "saturating")

# integer codes understood by the jitted event loop
FAMILY_CODES = {
    ("constant", None): 0,
    ("additive", None): 1,
    ("product_sqrt", None): 2,
    ("smooth", "constant"): 3,
    ("smooth", "additive"): 4,
    ("smooth", "saturating"): 5,
}


def energy(x):
    """The conserved mass functional E(x) = x."""
    return np.asarray(x, dtype=float)


def _check_mass(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("kernel arguments must be positive masses")
    return x, y


@dataclass(frozen=True)
class KernelSpec:
    """An immutable coagulation kernel.

    ``constant`` is the C of the bound K <= C (1 + x + y) for the additive
    families and the value c for the constant family.  ``cutoff`` switches
    on the cut-off kernel K_n (see :func:`apply_cutoff`).
    """

    family: str
    constant: float = 1.0
    smooth_name: Optional[str] = None
    cutoff: Optional[float] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not self.constant > 0:
            raise ValueError("kernel constant must be positive")
        if self.family == "smooth":
            if self.smooth_name not in SMOOTH_KERNELS:
                raise ValueError(f"unknown smooth kernel {self.smooth_name!r}")
        elif self.smooth_name is not None:
            raise ValueError("smooth_name only applies to the smooth family")
        if self.cutoff is not None and not self.cutoff > 0:
            raise ValueError("cut-off level must be positive")

    # convenience constructors
    @classmethod
    def constant_kernel(cls, c=1.0):
        return cls("constant", c)

    @classmethod
    def additive(cls, C=1.0):
        return cls("additive", C)

    @classmethod
    def product_sqrt(cls, C=1.0):
        return cls("product_sqrt", C)

    @classmethod
    def smooth(cls, name, C=1.0):
        return cls("smooth", C, smooth_name=name)

    @property
    def code(self) -> int:
        return FAMILY_CODES[(self.family, self.smooth_name)]

    @property
    def majorant_constant(self) -> float:
        # max of (1+sqrt x)(1+sqrt y)/(1+x+y) is 3/2, attained at x = y = 1/4
        if self.family == "product_sqrt":
            return 1.5 * self.constant
        return self.constant

    def _raw(self, x, y):
        C = self.constant
        name = self.smooth_name if self.family == "smooth" else self.family
        if name == "constant":
            return np.full(np.broadcast(x, y).shape, C, dtype=float)
        if name == "additive":
            return C * (x + y)
        if name == "product_sqrt":
            return C * (1.0 + np.sqrt(x)) * (1.0 + np.sqrt(y))
        if name == "saturating":
            return C * (2.0 - (np.exp(-x) + np.exp(-y)))
        raise AssertionError(name)

    def __call__(self, x, y):
        x, y = _check_mass(x, y)
        k = self._raw(x, y)
        if self.cutoff is not None:
            n = self.cutoff
            k = np.where(x + y <= n, k, np.minimum(k, self.constant * n))
        return k if k.ndim else float(k)

    def matrix(self, masses) -> np.ndarray:
        """K evaluated on all pairs of ``masses``."""
        m = np.asarray(masses, dtype=float)
        return np.asarray(self(m[:, None], m[None, :]), dtype=float)

    def to_dict(self) -> dict:
        d = {"family": self.family, "constant": self.constant}
        if self.smooth_name is not None:
            d["smooth_name"] = self.smooth_name
        if self.cutoff is not None:
            d["cutoff"] = self.cutoff
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(
            d["family"],
            float(d.get("constant", 1.0)),
            smooth_name=d.get("smooth_name"),
            cutoff=d.get("cutoff"),
        )


def eval_kernel(spec: KernelSpec, x, y):
    return spec(x, y)


def majorant(spec: KernelSpec, x, y):
    """Additive upper bound C (1 + x + y) dominating ``spec``."""
    x, y = _check_mass(x, y)
    v = spec.majorant_constant * (1.0 + x + y)
    return v if np.ndim(v) else float(v)


def apply_cutoff(spec: KernelSpec, n: float) -> KernelSpec:
    """Cut-off kernel: K below total mass ``n``, min(K, C n) above it."""
    if not n > 0:
        raise ValueError("cut-off level must be positive")
    return replace(spec, cutoff=float(n))
