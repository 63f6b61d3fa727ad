"""Latent-space polytopes of a piecewise-affine network.

Regions are described by inequality systems derived from the activation code,
clipped to a box, reduced to their facets with small LPs, converted to vertex
lists, triangulated, and finally expanded into signed orthant pieces that the
Gaussian routines integrate in closed form.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import lp
from .errors import DegenerateRegionError, InputError, NumericalError, ResourceError
from .network import (
    ActivationCode,
    AffineMap,
    GenerativeNetwork,
    activation_code,
    all_partial_affine,
)

EMPTY = None


@dataclass(frozen=True)
class GeometryTolerances:
    feasibility: float = 1e-8
    redundancy: float = 1e-9
    vertex_merge: float = 1e-7
    empty_margin: float = 1e-9


DEFAULT_TOL = GeometryTolerances()


class PolytopeH:
    """``{z : normals @ z <= offsets}``; ``origins[i]`` names the hyperplane of row i.

    Network rows carry ``(layer, unit)`` (1-based layer), box rows carry
    ``("box", axis, side)``.  Rows with a zero normal are dropped; if such a row
    is violated the polytope is flagged ``infeasible``.
    """

    def __init__(self, normals, offsets, origins=None, zero_tol: float = 1e-14):
        normals = np.atleast_2d(np.asarray(normals, dtype=float))
        offsets = np.asarray(offsets, dtype=float).reshape(-1)
        if origins is None:
            origins = [("row", i) for i in range(len(offsets))]
        origins = list(origins)
        if normals.shape[0] != offsets.shape[0] or len(origins) != offsets.shape[0]:
            raise InputError("normals, offsets and origins disagree in length")
        if not (np.all(np.isfinite(normals)) and np.all(np.isfinite(offsets))):
            raise InputError("inequality system has non-finite entries")
        norms = np.linalg.norm(normals, axis=1) if normals.size else np.zeros(len(offsets))
        keep = norms > zero_tol * max(1.0, norms.max(initial=0.0))
        self.infeasible = bool(np.any(offsets[~keep] < -zero_tol))
        self.normals = normals[keep].copy()
        self.offsets = offsets[keep].copy()
        self.origins = [o for o, k in zip(origins, keep) if k]

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    def __len__(self) -> int:
        return self.offsets.shape[0]

    def unit(self) -> "PolytopeH":
        """Same set with unit-norm rows."""
        norms = np.linalg.norm(self.normals, axis=1)
        out = PolytopeH.__new__(PolytopeH)
        out.normals = self.normals / norms[:, None]
        out.offsets = self.offsets / norms
        out.origins = list(self.origins)
        out.infeasible = self.infeasible
        return out

    def subset(self, idx) -> "PolytopeH":
        out = PolytopeH.__new__(PolytopeH)
        idx = list(idx)
        out.normals = self.normals[idx].copy()
        out.offsets = self.offsets[idx].copy()
        out.origins = [self.origins[i] for i in idx]
        out.infeasible = self.infeasible
        return out

    def concat(self, other: "PolytopeH") -> "PolytopeH":
        out = PolytopeH.__new__(PolytopeH)
        out.normals = np.vstack([self.normals, other.normals])
        out.offsets = np.concatenate([self.offsets, other.offsets])
        out.origins = self.origins + other.origins
        out.infeasible = self.infeasible or other.infeasible
        return out

    def contains(self, z, tol: float = 1e-8) -> np.ndarray:
        z = np.atleast_2d(z)
        return np.all(z @ self.normals.T <= self.offsets + tol, axis=1)


def region_hrep(net: GenerativeNetwork, code: ActivationCode) -> PolytopeH:
    """Inequalities ``-q_k A^{1->l}_k z <= q_k b^{1->l}_k`` over all piecewise hidden units."""
    mats, vecs = all_partial_affine(net, code)
    rows, offs, origins = [], [], []
    for ell, (q, layer) in enumerate(zip(code.signs, net.layers[:-1]), start=1):
        if not layer.piecewise:
            continue
        q = np.asarray(q, dtype=float)
        rows.append(-q[:, None] * mats[ell - 1])
        offs.append(q * vecs[ell - 1])
        origins.extend((ell, k) for k in range(len(q)))
    if not rows:
        return PolytopeH(np.zeros((0, net.latent_dim)), np.zeros(0), [])
    return PolytopeH(np.vstack(rows), np.concatenate(offs), origins)


def box_hrep(dim: int, radius: float) -> PolytopeH:
    eye = np.eye(dim)
    normals = np.vstack([eye, -eye])
    origins = [("box", i, +1) for i in range(dim)] + [("box", i, -1) for i in range(dim)]
    return PolytopeH(normals, np.full(2 * dim, float(radius)), origins)


def is_box_origin(origin) -> bool:
    return isinstance(origin[0], str) and origin[0] == "box"


def interior_point(hrep: PolytopeH, start=None, tol: GeometryTolerances = DEFAULT_TOL,
                   margin_cap: float = 1e6):
    """Chebyshev center of the polytope, or ``EMPTY`` when the margin is at most 1e-9."""
    return chebyshev_center(hrep, start, margin_cap, tol)[0]


def chebyshev_center(hrep: PolytopeH, start=None, margin_cap: float = 1e6,
                     tol: GeometryTolerances = DEFAULT_TOL):
    """Return ``(center, margin)``; center is ``EMPTY`` if the margin is too small."""
    if hrep.infeasible:
        return EMPTY, -np.inf
    s = hrep.dim
    if len(hrep) == 0:
        return np.zeros(s), np.inf
    u = hrep.unit()
    z0 = np.zeros(s) if start is None else np.asarray(start, dtype=float)
    t0 = min(float(np.min(u.offsets - u.normals @ z0)), margin_cap)
    a = np.vstack([np.hstack([u.normals, np.ones((len(u), 1))]), np.r_[np.zeros(s), 1.0]])
    b = np.r_[u.offsets, margin_cap]
    c = np.r_[np.zeros(s), 1.0]
    res = lp.maximize(c, a, b, np.r_[z0, t0])
    if res.status != "optimal":
        raise NumericalError(
            f"Chebyshev LP unbounded; rows={hrep.normals.tolist()} offsets={hrep.offsets.tolist()}"
        )
    margin = float(res.x[-1])
    if margin <= tol.empty_margin:
        return EMPTY, margin
    return res.x[:s], margin


def reduce_inequalities(hrep: PolytopeH, interior=None,
                        tol: GeometryTolerances = DEFAULT_TOL) -> np.ndarray:
    """Indices of the non-redundant rows, tested in order against the rows still kept."""
    u = hrep.unit()
    if interior is None:
        interior = interior_point(hrep, tol=tol)
        if interior is EMPTY:
            raise InputError("cannot reduce an empty polytope")
    active = list(range(len(u)))
    for i in range(len(u)):
        others = [j for j in active if j != i]
        res = lp.maximize(u.normals[i], u.normals[others], u.offsets[others], interior)
        if res.status == "optimal" and res.value <= u.offsets[i] + tol.redundancy:
            active.remove(i)
    return np.asarray(active, dtype=int)


def vertex_enumeration(hrep: PolytopeH, radius: float | None = None,
                       tol: GeometryTolerances = DEFAULT_TOL) -> np.ndarray:
    """All vertices by intersecting every S-subset of rows (box rows added when ``radius`` is set)."""
    h = hrep if radius is None else hrep.concat(box_hrep(hrep.dim, radius))
    u = h.unit()
    s = u.dim
    if len(u) < s:
        raise DegenerateRegionError("fewer rows than dimensions; polytope is unbounded")
    combos = np.array(list(itertools.combinations(range(len(u)), s)), dtype=int)
    mats = u.normals[combos]
    rhs = u.offsets[combos]
    dets = np.linalg.det(mats)
    ok = np.abs(dets) > 1e-12
    pts = np.linalg.solve(mats[ok], rhs[ok][..., None])[..., 0] if np.any(ok) else np.zeros((0, s))
    feas = np.all(pts @ u.normals.T <= u.offsets + tol.feasibility, axis=1)
    pts = pts[feas]
    out: list = []
    for p in pts[np.lexsort(pts.T[::-1])] if len(pts) else pts:
        if not any(np.max(np.abs(p - q)) <= tol.vertex_merge for q in out):
            out.append(p)
    verts = np.array(out).reshape(-1, s)
    if len(verts) < s + 1:
        raise DegenerateRegionError(f"only {len(verts)} vertices found in dimension {s}")
    return verts


# -- triangulation --------------------------------------------------------------

@dataclass(frozen=True)
class Simplex:
    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        s = v.shape[1]
        if v.shape != (s + 1, s):
            raise InputError(f"a simplex in dimension {s} needs {s + 1} vertices")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        scale = max(1.0, float(np.abs(v - v[0]).max()))
        if self.volume <= 1e-12 * scale**s:
            raise DegenerateRegionError("simplex vertices are affinely dependent")

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def volume(self) -> float:
        v = self.vertices
        return abs(float(np.linalg.det(v[1:] - v[0]))) / math.factorial(v.shape[1])

    def facets(self):
        """Unit normals ``n_j`` and offsets ``c_j`` with the simplex equal to ``{n_j z <= c_j}``.

        Facet ``j`` is the one opposite vertex ``j``.
        """
        v = self.vertices
        t_inv = np.linalg.inv((v[1:] - v[0]).T)
        # barycentric coordinates: lambda_j(z) = g_j . z + h_j
        g = np.vstack([-t_inv.sum(axis=0), t_inv])
        h = -g @ v[0]
        h[0] += 1.0
        norms = np.linalg.norm(g, axis=1)
        return -g / norms[:, None], h / norms


def _affine_rank(pts: np.ndarray, tol: float) -> int:
    if len(pts) <= 1:
        return 0
    d = pts[1:] - pts[0]
    sv = np.linalg.svd(d, compute_uv=False)
    scale = max(1.0, float(np.abs(d).max()))
    return int(np.sum(sv > tol * scale))


def hull_facets(vertices: np.ndarray, tol: float = 1e-9) -> list:
    """Facets of the convex hull as frozensets of vertex indices (brute force, small inputs)."""
    v = np.asarray(vertices, dtype=float)
    n, s = v.shape
    scale = max(1.0, float(np.abs(v).max()))
    found = set()
    for combo in itertools.combinations(range(n), s):
        pts = v[list(combo)]
        if _affine_rank(pts, tol) < s - 1:
            continue
        if s == 1:
            normal = np.ones(1)
        else:
            normal = np.linalg.svd(pts[1:] - pts[0])[2][-1]
        side = (v - pts[0]) @ normal
        if np.all(side <= tol * scale) or np.all(side >= -tol * scale):
            found.add(frozenset(np.flatnonzero(np.abs(side) <= tol * scale).tolist()))
    return sorted(found, key=lambda f: sorted(f))


def triangulate(vertices, tol: float = 1e-9) -> list:
    """Fan triangulation of the convex hull of ``vertices`` into simplices."""
    v = np.asarray(vertices, dtype=float)
    if v.ndim != 2 or len(v) < v.shape[1] + 1:
        raise DegenerateRegionError("need at least S+1 vertices to triangulate")
    s = v.shape[1]
    if _affine_rank(v, tol) < s:
        raise DegenerateRegionError("vertex set is flat")
    if s == 1:
        return [Simplex(np.array([[v.min()], [v.max()]]))]
    if s == 2:
        order = np.lexsort(v.T[::-1])
        apex = v[order[0]]
        rest = v[order[1:]]
        ang = np.arctan2(rest[:, 1] - apex[1], rest[:, 0] - apex[0])
        rest = rest[np.argsort(ang, kind="stable")]
        return [Simplex(np.array([apex, rest[i], rest[i + 1]])) for i in range(len(rest) - 1)]
    v = v[np.lexsort(v.T[::-1])]
    facets = hull_facets(v, tol)

    def fan(ids: frozenset, d: int) -> list:
        if d == 0:
            return [(min(ids),)]
        if d == 1:
            pts = sorted(ids)
            return [(pts[0], pts[-1])]
        faces = set()
        for f in facets:
            g = ids & f
            if g != ids and len(g) >= d and _affine_rank(v[sorted(g)], tol) == d - 1:
                faces.add(frozenset(g))
        apex = min(ids)
        out = []
        for g in sorted(faces, key=lambda f: sorted(f)):
            if apex in g:
                continue
            out.extend((apex,) + t for t in fan(g, d - 1))
        return out

    return [Simplex(v[list(t)]) for t in fan(frozenset(range(len(v))), s)]


# -- signed orthant pieces ------------------------------------------------------

@dataclass(frozen=True)
class SignedOrthantPiece:
    """``sign * 1{(transform @ z)_i >= lower_i for all i}``; ``lower`` may hold ``-inf``."""

    sign: int
    transform: np.ndarray
    lower: np.ndarray

    def __post_init__(self):
        if abs(float(np.linalg.det(self.transform))) <= 1e-12:
            raise DegenerateRegionError("piece transform is not invertible")

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(np.isfinite(self.lower))

    def shifted(self, mu) -> "SignedOrthantPiece":
        """Piece describing the same set translated by ``-mu``."""
        return SignedOrthantPiece(self.sign, self.transform, self.lower - self.transform @ mu)

    def contains(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        return np.all(z @ self.transform.T >= self.lower, axis=1)


def _completion(rows: np.ndarray, s: int) -> np.ndarray:
    if rows.shape[0] == s:
        return np.zeros((0, s))
    if rows.shape[0] == 0:
        return np.eye(s)
    _, _, vt = np.linalg.svd(rows)
    return vt[rows.shape[0]:]


def subset_signs(s: int):
    """Subsets ``J`` of the ``s+1`` facets with ``|J| <= s`` and their inclusion-exclusion signs."""
    for size in range(s + 1):
        sign = -1 if (size + s) % 2 else 1
        for j in itertools.combinations(range(s + 1), size):
            yield sign, j


def cone_decomposition(simplex: Simplex) -> list:
    """Signed half-space intersections whose signed sum is the simplex indicator.

    Includes the empty subset (the whole space), giving ``2^(S+1) - 1`` pieces.
    """
    n, c = simplex.facets()
    s = simplex.dim
    pieces = []
    for sign, j in subset_signs(s):
        j = list(j)
        rows = -n[j]
        comp = _completion(rows, s)
        transform = np.vstack([rows, comp])
        lower = np.r_[-c[j], np.full(comp.shape[0], -np.inf)]
        pieces.append(SignedOrthantPiece(sign, transform, lower))
    return pieces


# -- regions and partitions ----------------------------------------------------

@dataclass(frozen=True)
class Region:
    code: ActivationCode
    hrep: PolytopeH
    vertices: np.ndarray
    affine: AffineMap
    clipped: bool
    interior: np.ndarray
    simplices: tuple = field(repr=False)
    facet_normals: np.ndarray = field(repr=False)
    facet_offsets: np.ndarray = field(repr=False)

    @property
    def volume(self) -> float:
        return float(sum(t.volume for t in self.simplices))

    def pieces(self) -> list:
        return [p for t in self.simplices for p in cone_decomposition(t)]

    def contains(self, z, tol: float = 0.0) -> np.ndarray:
        return self.hrep.contains(z, tol)


def build_region(net: GenerativeNetwork, code: ActivationCode, radius: float, start=None,
                 tol: GeometryTolerances = DEFAULT_TOL):
    """Region for ``code`` clipped to ``|z_i| <= radius``, or ``EMPTY``."""
    h = region_hrep(net, code).concat(box_hrep(net.latent_dim, radius))
    center = interior_point(h, start=start, tol=tol)
    if center is EMPTY:
        return EMPTY
    keep = reduce_inequalities(h, center, tol)
    reduced = h.subset(keep).unit()
    verts = vertex_enumeration(reduced, tol=tol)
    simplices = tuple(triangulate(verts))
    fac = [t.facets() for t in simplices]
    a, b = _region_affine(net, code)
    return Region(
        code=code,
        hrep=reduced,
        vertices=verts,
        affine=AffineMap(a, b),
        clipped=any(is_box_origin(o) for o in reduced.origins),
        interior=center,
        simplices=simplices,
        facet_normals=np.ascontiguousarray([f[0] for f in fac]),
        facet_offsets=np.ascontiguousarray([f[1] for f in fac]),
    )


def _region_affine(net, code):
    mats, vecs = all_partial_affine(net, code)
    a, b = mats[-1], vecs[-1]
    a.setflags(write=False)
    b.setflags(write=False)
    return a, b


@dataclass(frozen=True)
class Partition:
    regions: tuple
    bounding_radius: float
    neighbors: frozenset = field(default=frozenset(), repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {r.code.key(): i for i, r in enumerate(self.regions)})

    def __len__(self) -> int:
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    def codes(self) -> list:
        return [r.code for r in self.regions]

    def find(self, code: ActivationCode):
        i = self._index.get(code.key())
        return None if i is None else self.regions[i]

    def index_of_flat(self, flat_keys: np.ndarray) -> np.ndarray:
        """Region index per row of an int8 sign matrix, -1 where absent."""
        return np.array([self._index.get(row.tobytes(), -1) for row in flat_keys], dtype=int)

    def locate(self, net: GenerativeNetwork, z):
        z = np.asarray(z, dtype=float)
        if np.any(np.abs(z) > self.bounding_radius):
            return None
        return self.find(activation_code(net, z))

    def to_json_obj(self) -> list:
        return [
            {
                "code": r.code.to_list(),
                "vertices": r.vertices.tolist(),
                "affine": {"A": r.affine.slope.tolist(), "b": r.affine.offset.tolist()},
                "clipped": r.clipped,
            }
            for r in self.regions
        ]


def default_radius(sigma_z) -> float:
    return 8.0 * float(np.sqrt(np.max(np.diag(np.atleast_2d(sigma_z)))))


def _coincident_units(full: PolytopeH, n, c, tol: GeometryTolerances) -> list:
    """Origins of every unit whose hyperplane is the facet ``n @ z = c``.

    Several units can share a hyperplane (e.g. mirrored first-layer rows); the
    region across such a facet differs from this one in all of them at once.
    """
    eps = tol.redundancy * 10
    hit = (np.max(np.abs(full.normals - n), axis=1) <= eps) & (np.abs(full.offsets - c) <= eps * max(1.0, abs(c)))
    return [full.origins[i] for i in np.flatnonzero(hit)]


def enumerate_partition(net: GenerativeNetwork, seed=None, bounding_radius: float = 8.0,
                        max_regions: int = 10**6,
                        tol: GeometryTolerances = DEFAULT_TOL) -> Partition:
    """Breadth-first face walk from the region containing ``seed``."""
    if not bounding_radius > 0:
        raise InputError("bounding radius must be positive")
    s = net.latent_dim
    seed = np.zeros(s) if seed is None else np.asarray(seed, dtype=float).reshape(s)
    if not np.all(np.isfinite(seed)):
        raise InputError("seed must be finite")
    seed = np.clip(seed, -0.5 * bounding_radius, 0.5 * bounding_radius)

    start_region = build_region(net, activation_code(net, seed), bounding_radius, seed, tol)
    if start_region is EMPTY:
        # seed sits on a measure-zero boundary; probe nearby points
        rng = np.random.Generator(np.random.Philox(0))
        for _ in range(100):
            probe = seed + rng.uniform(-1e-3, 1e-3, size=s) * bounding_radius
            start_region = build_region(net, activation_code(net, probe), bounding_radius, probe, tol)
            if start_region is not EMPTY:
                break
        else:
            raise NumericalError("could not find a nonempty starting region")

    found = {start_region.code.key(): start_region}
    seen = {start_region.code.key()}
    edges = set()
    queue = deque([start_region])
    while queue:
        region = queue.popleft()
        full = region_hrep(net, region.code).unit()
        for row, (origin, n, c) in enumerate(zip(region.hrep.origins, region.hrep.normals,
                                                  region.hrep.offsets)):
            if is_box_origin(origin):
                continue
            nb_code = region.code
            for o in _coincident_units(full, n, c, tol):
                nb_code = nb_code.flip(*o)
            key = nb_code.key()
            if key not in seen:
                seen.add(key)
                nb = build_region(net, nb_code, bounding_radius, region.interior, tol)
                if nb is EMPTY:
                    continue
                found[key] = nb
                queue.append(nb)
                if len(found) > max_regions:
                    raise ResourceError(f"partition exceeds the cap of {max_regions} regions")
            if key in found:
                edges.add(frozenset((region.code.key(), key)))
    regions = tuple(sorted(found.values(), key=lambda r: r.code))
    return Partition(regions, float(bounding_radius), frozenset(edges))
