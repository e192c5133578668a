"""Plain-text export of the control-variate selection problem as a MIQCP.

The problem over ``a in R^J``, ``b in {0,1}^J`` and two auxiliary scalars is::

    minimize    V_G * V_T
    subject to  V_G >= 1/2 a^T Q a + r^T a + u      (one quadratic constraint)
                V_T  = t0 + t^T b                   (one linear constraint)
                b_i  = 1[a_i != 0]                  (J indicator constraints)

File layout (one token group per line, ``#`` starts a comment)::

    MIQCP g2t 1
    VARS <count>
    a_1 continuous
    ...
    b_1 binary
    ...
    V_G continuous
    V_T continuous
    OBJ
    minimize V_G * V_T
    QCON V_G >= 0.5 a'Qa + r'a + u
    u <float>
    r <float> ... <float>
    Q <nnz>
    <i> <j> <float>            # 1-based, every nonzero entry of the full matrix
    LCON V_T = t0 + t'b
    t0 <float>
    t <float> ... <float>
    IND <J>
    b_1 a_1
    ...
    END

Floats are written with ``repr`` so a parse round-trips exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import IngestionError
from .selection import CostProfile, SquaredNormStats


def export_miqcp(stats: SquaredNormStats, profile: CostProfile) -> str:
    stats.check_finite()
    J = stats.J
    if profile.J != J:
        raise IngestionError("cost profile and statistics disagree on J")
    Q = np.asarray(stats.Q, dtype=float).reshape(J, J)
    lines = ["MIQCP g2t 1", f"VARS {2 * J + 2}"]
    lines += [f"a_{i + 1} continuous" for i in range(J)]
    lines += [f"b_{i + 1} binary" for i in range(J)]
    lines += ["V_G continuous", "V_T continuous"]
    lines += ["OBJ", "minimize V_G * V_T"]
    lines += ["QCON V_G >= 0.5 a'Qa + r'a + u", f"u {float(stats.u)!r}"]
    lines.append(" ".join(["r"] + [repr(float(x)) for x in np.asarray(stats.r).ravel()]))
    nz = [(i, j) for i in range(J) for j in range(J) if Q[i, j] != 0.0]
    lines.append(f"Q {len(nz)}")
    lines += [f"{i + 1} {j + 1} {float(Q[i, j])!r}" for i, j in nz]
    lines += ["LCON V_T = t0 + t'b", f"t0 {float(profile.t0)!r}"]
    lines.append(" ".join(["t"] + [repr(float(x)) for x in profile.t]))
    lines.append(f"IND {J}")
    lines += [f"b_{i + 1} a_{i + 1}" for i in range(J)]
    lines.append("END")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class MIQCPProblem:
    variables: List[Tuple[str, str]]
    objective_sense: str
    objective_terms: Tuple[str, str]
    u: float
    r: np.ndarray
    Q: np.ndarray
    t0: float
    t: np.ndarray
    indicators: List[Tuple[str, str]]
    n_quadratic: int = 1
    n_linear: int = 1

    @property
    def J(self) -> int:
        return self.r.size

    def quadratic_lhs(self, a) -> float:
        a = np.asarray(a, dtype=float)
        return float(0.5 * a @ self.Q @ a + self.r @ a + self.u)

    def objective(self, a, b, V_G, V_T) -> float:
        return float(V_G) * float(V_T)

    def violations(self, a, b, V_G, V_T, tol: float = 1e-9) -> List[str]:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b)
        out = []
        if not np.all(np.isin(b, (0, 1))):
            out.append("b is not binary")
        q = self.quadratic_lhs(a)
        if V_G < q - tol * max(1.0, abs(q)):
            out.append(f"quadratic constraint: V_G={V_G!r} < {q!r}")
        lin = float(self.t0 + self.t @ b)
        if abs(V_T - lin) > tol * max(1.0, abs(lin)):
            out.append(f"linear constraint: V_T={V_T!r} != {lin!r}")
        for i in range(self.J):
            if int(b[i]) != int(a[i] != 0.0):
                out.append(f"indicator {i + 1}: b={int(b[i])} but a={a[i]!r}")
        return out

    def is_feasible(self, a, b, V_G, V_T, tol: float = 1e-9) -> bool:
        return not self.violations(a, b, V_G, V_T, tol)


def parse_miqcp(text: str) -> MIQCPProblem:
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    pos = 0

    def take(prefix=None) -> str:
        nonlocal pos
        if pos >= len(lines):
            raise IngestionError("unexpected end of MIQCP file")
        line = lines[pos]
        if prefix is not None and line.split()[0] != prefix:
            raise IngestionError(f"line {pos + 1}: expected {prefix!r}, got {line!r}")
        pos += 1
        return line

    def floats(line, skip=1):
        try:
            return [float(x) for x in line.split()[skip:]]
        except ValueError:
            raise IngestionError(f"malformed numeric line {line!r}") from None

    if take("MIQCP").split()[1:2] != ["g2t"]:
        raise IngestionError("not a g2t MIQCP file")
    n_vars = int(take("VARS").split()[1])
    variables = []
    for _ in range(n_vars):
        name, kind = take().split()
        variables.append((name, kind))
    take("OBJ")
    sense, lhs, star, rhs = take().split()
    if star != "*":
        raise IngestionError("objective must be a product of two variables")
    take("QCON")
    u = floats(take("u"))[0]
    r = np.asarray(floats(take("r")))
    J = r.size
    nnz = int(take("Q").split()[1])
    Q = np.zeros((J, J))
    for _ in range(nnz):
        i, j, v = take().split()
        Q[int(i) - 1, int(j) - 1] = float(v)
    take("LCON")
    t0 = floats(take("t0"))[0]
    t = np.asarray(floats(take("t")))
    n_ind = int(take("IND").split()[1])
    indicators = [tuple(take().split()) for _ in range(n_ind)]
    take("END")
    if t.size != J:
        raise IngestionError("cost vector length differs from J")
    return MIQCPProblem(variables, sense, (lhs, rhs), u, r, Q, t0, t, indicators)
