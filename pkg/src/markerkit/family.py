"""Marker family model: pattern classes, keypoint layouts, coding libraries.

A marker is an arrangement of local patterns. Each pattern's centroid is a
keypoint and its class encodes a digital symbol (or nothing, for structural
patterns). A family bundles the layout, the glyphs, the codeword library and
the ROI definition, and knows how to render marker bitmaps and decode symbol
sequences back to marker IDs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np

SYMBOL_CHARS = "0123456789abcdefghijklmnopqrstuvwxyz"

ROTATION_ASYMMETRIC = "rotation_asymmetric_codes"
ORIENTATION_PATTERNS = "orientation_patterns"


class FamilyError(ValueError):
    """Raised when a marker family definition violates its invariants."""


@dataclass(frozen=True, eq=False)
class PatternClass:
    """One local pattern category: a glyph bitmap plus the symbol it encodes."""

    class_id: int
    glyph: np.ndarray  # 2D float array in [0, 1], one unit cell
    encodes_symbol: int | None = None  # None marks a structural pattern

    def __post_init__(self):
        glyph = np.asarray(self.glyph, dtype=np.float64)
        if glyph.ndim != 2 or glyph.size == 0:
            raise FamilyError("pattern glyph must be a non-empty 2D array")
        glyph = np.clip(glyph, 0.0, 1.0)
        glyph.flags.writeable = False
        object.__setattr__(self, "glyph", glyph)

    @property
    def is_structural(self) -> bool:
        return self.encodes_symbol is None


@dataclass(frozen=True, eq=False)
class KeypointLayout:
    """Ordered keypoint positions in the unit marker frame.

    The position order is the canonical sorting order: row-major from the
    top-left for grids, innermost ring first and counter-clockwise from +x
    for circular layouts.
    """

    kind: str  # "square_grid" | "circular_rings" | "explicit"
    positions: np.ndarray  # (n, 2) float, strictly inside (0, 1)^2
    class_constraints: tuple[frozenset[int], ...]
    cell_frac: float  # glyph cell side, as a fraction of the unit frame
    grid_size: int | None = None
    rings: int | None = None
    slots: int | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] == 0:
            raise FamilyError("layout positions must be a non-empty (n, 2) array")
        if np.any(pos <= 0.0) or np.any(pos >= 1.0):
            raise FamilyError("layout positions must lie strictly inside (0, 1)^2")
        if len(self.class_constraints) != pos.shape[0]:
            raise FamilyError("one class constraint set required per position")
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @staticmethod
    def square_grid(n: int, constraints: Sequence[Iterable[int]] | Iterable[int]) -> "KeypointLayout":
        """N x N grid at cell centroids ((j+0.5)/N, (i+0.5)/N), row-major."""
        if n < 2:
            raise FamilyError("square grid needs n >= 2")
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        pos = np.stack([(jj.ravel() + 0.5) / n, (ii.ravel() + 0.5) / n], axis=1)
        cons = _expand_constraints(constraints, n * n)
        return KeypointLayout("square_grid", pos, cons, cell_frac=1.0 / n, grid_size=n)

    @staticmethod
    def circular_rings(
        rings: int,
        slots: int,
        constraints: Sequence[Iterable[int]] | Iterable[int],
        inner_radius: float = 0.18,
        outer_radius: float = 0.44,
    ) -> "KeypointLayout":
        """Concentric rings of dot slots, innermost first, CCW from +x."""
        if rings < 1 or slots < 4:
            raise FamilyError("circular layout needs rings >= 1 and slots >= 4")
        radii = np.linspace(inner_radius, outer_radius, rings)
        angles = 2.0 * np.pi * np.arange(slots) / slots
        pos = []
        for r in radii:
            # y-down image frame: CCW from +x means decreasing y first
            pos.extend([(0.5 + r * np.cos(a), 0.5 - r * np.sin(a)) for a in angles])
        pos = np.asarray(pos)
        # keep dots from touching: bounded by ring gap and in-ring chord
        chord = 2.0 * radii[0] * np.sin(np.pi / slots)
        gap = radii[1] - radii[0] if rings > 1 else chord
        cell = 0.85 * min(chord, gap)
        cons = _expand_constraints(constraints, rings * slots)
        return KeypointLayout("circular_rings", pos, cons, cell_frac=cell, rings=rings, slots=slots)

    @staticmethod
    def explicit(positions, constraints, cell_frac: float) -> "KeypointLayout":
        pos = np.asarray(positions, dtype=np.float64)
        cons = _expand_constraints(constraints, pos.shape[0])
        return KeypointLayout("explicit", pos, cons, cell_frac=cell_frac)

    def rotation_permutations(self) -> list[np.ndarray]:
        """Permutations realizing the layout's rotational symmetries.

        Entry r is `perm` with: observed[i] = original[perm[i]] after the
        marker is physically rotated by r steps clockwise (step = 90 deg for
        grids, one slot angle for circular layouts).
        """
        if self.kind == "circular_rings":
            angles = [2.0 * np.pi * k / self.slots for k in range(self.slots)]
        else:
            angles = [k * np.pi / 2.0 for k in range(4)]
        perms = []
        for angle in angles:
            perm = self._permutation_for_cw_rotation(angle)
            if perm is not None:
                perms.append(perm)
        return perms

    def _permutation_for_cw_rotation(self, angle: float) -> np.ndarray | None:
        # clockwise in y-down image coords
        c, s = np.cos(angle), np.sin(angle)
        d = self.positions - 0.5
        rotated = np.stack([c * d[:, 0] - s * d[:, 1], s * d[:, 0] + c * d[:, 1]], axis=1) + 0.5
        perm = np.full(len(self), -1, dtype=np.int64)
        for j, p in enumerate(rotated):
            dist = np.linalg.norm(self.positions - p, axis=1)
            i = int(np.argmin(dist))
            if dist[i] > 1e-9 or perm[i] >= 0:
                return None
            perm[i] = j
        return perm


@dataclass(frozen=True, eq=False)
class CodeLibrary:
    """Ordered codewords; a marker ID is its codeword's index."""

    codewords: tuple[tuple[int, ...], ...]
    symbol_arity: int
    max_hamming: int
    orientation_mode: str = ROTATION_ASYMMETRIC

    def __post_init__(self):
        if not self.codewords:
            raise FamilyError("library must contain at least one codeword")
        if self.orientation_mode not in (ROTATION_ASYMMETRIC, ORIENTATION_PATTERNS):
            raise FamilyError(f"unknown orientation mode {self.orientation_mode!r}")
        length = len(self.codewords[0])
        for cw in self.codewords:
            if len(cw) != length:
                raise FamilyError("all codewords must have the same length")
            if any(s < 0 or s >= self.symbol_arity for s in cw):
                raise FamilyError("codeword symbol out of range")

    def __len__(self) -> int:
        return len(self.codewords)

    @property
    def codeword_length(self) -> int:
        return len(self.codewords[0])


@dataclass(frozen=True, eq=False)
class RoiDefinition:
    """How the family's region of interest is derived from its geometry."""

    kind: str  # "quad_border" | "ellipse_vertices" | "designated_keypoints"
    indices: tuple[int, ...] = ()
    classes: tuple[int, ...] = ()
    radius: float | None = None  # ellipse_vertices: circle radius in unit frame


@dataclass(frozen=True, eq=False)
class BorderSpec:
    """Margins around the code area, in units of one glyph cell."""

    border_cells: float = 1.0  # dark frame width
    quiet_cells: float = 1.0  # light margin outside the frame
    border_value: float = 0.0
    background_value: float = 1.0


@dataclass(frozen=True, eq=False)
class DecodeResult:
    marker_id: int | None
    rotation_index: int | None
    distance: int | None
    ambiguous: bool = False

    @property
    def ok(self) -> bool:
        return self.marker_id is not None


@dataclass(frozen=True, eq=False)
class LibraryReport:
    min_intermarker_distance: int | None
    min_rotational_self_distance: int | None
    violations: tuple[tuple[int, int, int, int], ...]  # (id_a, id_b, rotation, distance)

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass(frozen=True, eq=False)
class MarkerFamily:
    """Declarative description of one marker family."""

    name: str
    pattern_classes: tuple[PatternClass, ...]
    layout: KeypointLayout
    library: CodeLibrary
    roi_definition: RoiDefinition
    border_spec: BorderSpec = field(default_factory=BorderSpec)

    def __post_init__(self):
        if len(self.pattern_classes) < 2:
            raise FamilyError("a family needs at least 2 pattern classes")
        ids = [p.class_id for p in self.pattern_classes]
        if len(set(ids)) != len(ids):
            raise FamilyError("pattern class ids must be unique")
        by_id = {p.class_id: p for p in self.pattern_classes}
        enc_idx = []
        for i, cons in enumerate(self.layout.class_constraints):
            classes = [by_id[c] for c in sorted(cons) if c in by_id]
            if len(classes) != len(cons):
                raise FamilyError(f"position {i} references unknown pattern classes")
            symbols = [p.encodes_symbol for p in classes]
            if all(s is None for s in symbols):
                continue  # structural position
            if any(s is None for s in symbols):
                raise FamilyError(f"position {i} mixes encoding and structural classes")
            if sorted(symbols) != list(range(self.library.symbol_arity)):
                raise FamilyError(
                    f"position {i} must allow exactly one class per symbol value"
                )
            enc_idx.append(i)
        if len(enc_idx) != self.library.codeword_length:
            raise FamilyError(
                f"codeword length {self.library.codeword_length} != "
                f"{len(enc_idx)} encoding positions"
            )
        object.__setattr__(self, "_encoding_indices", np.asarray(enc_idx, dtype=np.int64))
        object.__setattr__(self, "_class_by_id", by_id)
        object.__setattr__(self, "_codeword_rotations", self._build_codeword_rotations())
        if self.roi_points_unit().shape[0] < 4:
            raise FamilyError("roi definition must yield at least 4 points")

    # -- structure ---------------------------------------------------------

    @property
    def encoding_indices(self) -> np.ndarray:
        return self._encoding_indices

    def pattern_class(self, class_id: int) -> PatternClass:
        return self._class_by_id[class_id]

    def class_for_symbol(self, position: int, symbol: int) -> PatternClass:
        for cid in sorted(self.layout.class_constraints[position]):
            p = self._class_by_id[cid]
            if p.encodes_symbol == symbol:
                return p
        raise FamilyError(f"no class encodes symbol {symbol} at position {position}")

    def structural_class(self, position: int) -> PatternClass:
        (cid,) = self.layout.class_constraints[position]
        return self._class_by_id[cid]

    def is_encoding_position(self, position: int) -> bool:
        return bool(np.isin(position, self._encoding_indices))

    def position_classes(self, marker_id: int) -> list[PatternClass]:
        """Pattern class at every layout position for the given marker."""
        if marker_id < 0 or marker_id >= len(self.library):
            raise FamilyError(f"marker id {marker_id} outside library of {len(self.library)}")
        codeword = self.library.codewords[marker_id]
        enc_rank = {int(i): k for k, i in enumerate(self._encoding_indices)}
        out = []
        for i in range(len(self.layout)):
            if i in enc_rank:
                out.append(self.class_for_symbol(i, codeword[enc_rank[i]]))
            else:
                out.append(self.structural_class(i))
        return out

    def _build_codeword_rotations(self) -> list[np.ndarray]:
        if self.library.orientation_mode == ORIENTATION_PATTERNS:
            return [np.arange(self.library.codeword_length, dtype=np.int64)]
        rotations = []
        enc = self._encoding_indices
        rank = np.full(len(self.layout), -1, dtype=np.int64)
        rank[enc] = np.arange(len(enc))
        for perm in self.layout.rotation_permutations():
            mapped = perm[enc]
            if np.any(rank[mapped] < 0):
                raise FamilyError(
                    "rotation_asymmetric_codes requires the encoding positions "
                    "to be closed under the layout's rotation group"
                )
            rotations.append(rank[mapped])
        return rotations

    def codeword_rotations(self) -> list[np.ndarray]:
        """Permutations over encoding ranks, one per candidate rotation."""
        return list(self._codeword_rotations)

    def rotated_codeword(self, marker_id: int, rotation: int) -> tuple[int, ...]:
        cw = np.asarray(self.library.codewords[marker_id])
        return tuple(int(s) for s in cw[self._codeword_rotations[rotation]])

    # -- geometry ----------------------------------------------------------

    def unit_extent(self) -> tuple[float, float]:
        """(lo, hi) of the full marker, border included, in unit-layout coords."""
        pad = (self.border_spec.border_cells + self.border_spec.quiet_cells) * self.layout.cell_frac
        return -pad, 1.0 + pad

    def roi_points_unit(self) -> np.ndarray:
        d = self.roi_definition
        if d.kind == "quad_border":
            c = self.border_spec.border_cells * self.layout.cell_frac
            return np.array([[-c, -c], [1 + c, -c], [1 + c, 1 + c], [-c, 1 + c]])
        if d.kind == "ellipse_vertices":
            r = d.radius
            if r is None:
                r = float(np.max(np.linalg.norm(self.layout.positions - 0.5, axis=1)))
                r += 0.75 * self.layout.cell_frac
            return np.array([[0.5 + r, 0.5], [0.5, 0.5 + r], [0.5 - r, 0.5], [0.5, 0.5 - r]])
        if d.kind == "designated_keypoints":
            return self.layout.positions[list(d.indices)].copy()
        raise FamilyError(f"unknown roi definition kind {d.kind!r}")

    def outer_quad_unit(self) -> np.ndarray:
        """Corners of the full printed marker, clockwise from top-left."""
        lo, hi = self.unit_extent()
        return np.array([[lo, lo], [hi, lo], [hi, hi], [lo, hi]])

    # -- rendering ---------------------------------------------------------

    def min_render_size(self) -> int:
        lo, hi = self.unit_extent()
        return int(np.ceil(4.0 * (hi - lo) / self.layout.cell_frac))

    def render(self, marker_id: int, size_px: int) -> np.ndarray:
        """Render the marker as a grayscale uint8 bitmap of side `size_px`."""
        if size_px < self.min_render_size():
            raise FamilyError(
                f"size {size_px} px too small; need >= {self.min_render_size()} "
                f"for distinct glyphs"
            )
        classes = self.position_classes(marker_id)  # validates marker_id
        lo, hi = self.unit_extent()
        scale = size_px / (hi - lo)

        def to_px(u: float) -> int:
            return int(round((u - lo) * scale))

        img = np.full((size_px, size_px), _u8(self.border_spec.background_value), np.uint8)
        b = self.border_spec.border_cells * self.layout.cell_frac
        if b > 0:
            o0, o1 = to_px(-b), to_px(1 + b)
            img[o0:o1, o0:o1] = _u8(self.border_spec.border_value)
            i0, i1 = to_px(0.0), to_px(1.0)
            img[i0:i1, i0:i1] = _u8(self.border_spec.background_value)
        half = self.layout.cell_frac / 2.0
        for pos, cls in zip(self.layout.positions, classes):
            x0, x1 = to_px(pos[0] - half), to_px(pos[0] + half)
            y0, y1 = to_px(pos[1] - half), to_px(pos[1] + half)
            cell = cv2.resize(
                (cls.glyph * 255.0).astype(np.uint8),
                (x1 - x0, y1 - y0),
                interpolation=cv2.INTER_NEAREST,
            )
            img[y0:y1, x0:x1] = cell
        return img

    def match_glyph(self, patch: np.ndarray, allowed: Iterable[int] | None = None) -> int:
        """Classify a grayscale cell patch to the nearest pattern class."""
        classes = (
            self.pattern_classes
            if allowed is None
            else [self._class_by_id[c] for c in sorted(allowed)]
        )
        patch = np.asarray(patch, dtype=np.float64)
        if patch.max() > 1.0:
            patch = patch / 255.0
        best, best_err = None, np.inf
        for cls in classes:
            ref = cv2.resize(cls.glyph, (patch.shape[1], patch.shape[0]), interpolation=cv2.INTER_AREA)
            err = float(np.mean((ref - patch) ** 2))
            if err < best_err:
                best, best_err = cls.class_id, err
        return best

    # -- orientation -------------------------------------------------------

    def resolve_orientation(self, position_classes: Sequence[int | None]) -> int:
        """Rotation step that best explains observed structural classes.

        `position_classes` holds one observed class id (or None) per canonical
        layout position. Only meaningful for orientation_patterns families; the
        returned step r means the marker appears rotated r steps clockwise, so
        un-rotating by r recovers the canonical reading order.
        """
        perms = self.layout.rotation_permutations()
        structural = [
            i for i in range(len(self.layout)) if not self.is_encoding_position(i)
        ]
        if not structural or len(perms) <= 1:
            return 0
        expected = {i: self.structural_class(i).class_id for i in structural}
        best_r, best_score = 0, -1
        for r, perm in enumerate(perms):
            # observed[q] = original[perm[q]], so original position i is seen
            # at the slot q with perm[q] == i
            inv = np.argsort(perm)
            score = sum(
                1 for i in structural if position_classes[inv[i]] == expected[i]
            )
            if score > best_score:
                best_r, best_score = r, score
        return best_r

    def unrotate_position_values(self, values: Sequence, rotation: int) -> list:
        """Undo a clockwise rotation of per-position observations."""
        perm = self.layout.rotation_permutations()[rotation]
        out = [None] * len(self.layout)
        for i in range(len(self.layout)):
            out[perm[i]] = values[i]
        return out


# -- module-level operations ------------------------------------------------


def render_marker(family: MarkerFamily, marker_id: int, size_px: int) -> np.ndarray:
    return family.render(marker_id, size_px)


def hamming_distance(symbols: Sequence[int | None], codeword: Sequence[int]) -> int:
    """Symbol-wise disagreement; an erasure (None) always disagrees."""
    if len(symbols) != len(codeword):
        raise FamilyError("symbol sequence length does not match codeword length")
    return sum(1 for s, c in zip(symbols, codeword) if s is None or int(s) != int(c))


def decode_symbols(family: MarkerFamily, symbols: Sequence[int | None]) -> DecodeResult:
    """Look up the symbol sequence in the library, tolerant up to max_hamming.

    Returns the unique (id, rotation) at minimal distance <= max_hamming;
    ties between distinct candidates decode as no-match with ambiguous=True.
    """
    lib = family.library
    if len(symbols) != lib.codeword_length:
        raise FamilyError(
            f"expected {lib.codeword_length} symbols, got {len(symbols)}"
        )
    for s in symbols:
        if s is not None and (s < 0 or s >= lib.symbol_arity):
            raise FamilyError(f"symbol value {s} outside arity {lib.symbol_arity}")
    best: list[tuple[int, int]] = []
    best_d = lib.max_hamming + 1
    for marker_id in range(len(lib)):
        for r in range(len(family.codeword_rotations())):
            d = hamming_distance(symbols, family.rotated_codeword(marker_id, r))
            if d < best_d:
                best, best_d = [(marker_id, r)], d
            elif d == best_d:
                best.append((marker_id, r))
    if not best:
        return DecodeResult(None, None, None)
    if len(best) > 1:
        return DecodeResult(None, None, best_d, ambiguous=True)
    marker_id, rotation = best[0]
    return DecodeResult(marker_id, rotation, best_d)


def validate_library(family: MarkerFamily) -> LibraryReport:
    """Report pairwise/rotational distances and invariant violations."""
    lib = family.library
    n_rot = len(family.codeword_rotations())
    rotated = [
        [family.rotated_codeword(i, r) for r in range(n_rot)] for i in range(len(lib))
    ]
    violations = []
    inter = None
    self_rot = None
    for i in range(len(lib)):
        cw_i = lib.codewords[i]
        for j in range(i, len(lib)):
            for r in range(n_rot):
                if i == j and r == 0:
                    continue
                d = hamming_distance(cw_i, rotated[j][r])
                if i == j:
                    self_rot = d if self_rot is None else min(self_rot, d)
                else:
                    inter = d if inter is None else min(inter, d)
                if d <= lib.max_hamming and (
                    lib.orientation_mode == ROTATION_ASYMMETRIC or (i != j and r == 0)
                ):
                    violations.append((i, j, r, d))
    return LibraryReport(inter, self_rot, tuple(violations))


def keypoint_template(family: MarkerFamily) -> list[tuple[np.ndarray, frozenset[int]]]:
    """Canonical ordered keypoint template: (unit position, class constraint)."""
    return [
        (family.layout.positions[i].copy(), family.layout.class_constraints[i])
        for i in range(len(family.layout))
    ]


# -- serialization -----------------------------------------------------------


def family_to_dict(family: MarkerFamily) -> dict:
    layout = family.layout
    ldict: dict = {"kind": layout.kind, "cell_frac": layout.cell_frac}
    if layout.kind == "square_grid":
        ldict["grid_size"] = layout.grid_size
    elif layout.kind == "circular_rings":
        ldict["rings"] = layout.rings
        ldict["slots"] = layout.slots
        ldict["positions"] = layout.positions.tolist()
    else:
        ldict["positions"] = layout.positions.tolist()
    ldict["class_constraints"] = [sorted(c) for c in layout.class_constraints]
    return {
        "name": family.name,
        "symbol_arity": family.library.symbol_arity,
        "layout": ldict,
        "pattern_classes": [
            {
                "class_id": p.class_id,
                "encodes_symbol": p.encodes_symbol,
                "glyph": np.round(np.asarray(p.glyph), 6).tolist(),
            }
            for p in family.pattern_classes
        ],
        "codewords": [
            "".join(SYMBOL_CHARS[s] for s in cw) for cw in family.library.codewords
        ],
        "max_hamming": family.library.max_hamming,
        "orientation_mode": family.library.orientation_mode,
        "roi_definition": {
            "kind": family.roi_definition.kind,
            "indices": list(family.roi_definition.indices),
            "classes": list(family.roi_definition.classes),
            "radius": family.roi_definition.radius,
        },
        "border_spec": {
            "border_cells": family.border_spec.border_cells,
            "quiet_cells": family.border_spec.quiet_cells,
            "border_value": family.border_spec.border_value,
            "background_value": family.border_spec.background_value,
        },
    }


def family_from_dict(data: dict, base_dir: Path | None = None) -> MarkerFamily:
    classes = []
    for p in data["pattern_classes"]:
        glyph = p["glyph"]
        if isinstance(glyph, dict) and "file" in glyph:
            path = Path(glyph["file"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
            if img is None:
                raise FamilyError(f"cannot read glyph image {path}")
            glyph = img.astype(np.float64) / 255.0
        classes.append(
            PatternClass(int(p["class_id"]), np.asarray(glyph, np.float64), p.get("encodes_symbol"))
        )
    ld = data["layout"]
    cons = [frozenset(c) for c in ld["class_constraints"]]
    if ld["kind"] == "square_grid":
        layout = KeypointLayout.square_grid(int(ld["grid_size"]), cons)
    elif ld["kind"] == "circular_rings":
        layout = KeypointLayout(
            "circular_rings",
            np.asarray(ld["positions"], np.float64),
            tuple(cons),
            cell_frac=float(ld["cell_frac"]),
            rings=int(ld["rings"]),
            slots=int(ld["slots"]),
        )
    else:
        layout = KeypointLayout.explicit(
            np.asarray(ld["positions"], np.float64), cons, float(ld["cell_frac"])
        )
    codewords = tuple(
        tuple(SYMBOL_CHARS.index(ch) for ch in cw) for cw in data["codewords"]
    )
    library = CodeLibrary(
        codewords,
        symbol_arity=int(data["symbol_arity"]),
        max_hamming=int(data["max_hamming"]),
        orientation_mode=data.get("orientation_mode", ROTATION_ASYMMETRIC),
    )
    rd = data.get("roi_definition", {"kind": "quad_border"})
    roi = RoiDefinition(
        rd["kind"],
        tuple(rd.get("indices") or ()),
        tuple(rd.get("classes") or ()),
        rd.get("radius"),
    )
    bs = data.get("border_spec", {})
    border = BorderSpec(
        border_cells=float(bs.get("border_cells", 1.0)),
        quiet_cells=float(bs.get("quiet_cells", 1.0)),
        border_value=float(bs.get("border_value", 0.0)),
        background_value=float(bs.get("background_value", 1.0)),
    )
    return MarkerFamily(data["name"], tuple(classes), layout, library, roi, border)


def load_family(path: str | Path) -> MarkerFamily:
    path = Path(path)
    return family_from_dict(json.loads(path.read_text()), base_dir=path.parent)


def save_family(family: MarkerFamily, path: str | Path) -> None:
    Path(path).write_text(json.dumps(family_to_dict(family), indent=1, sort_keys=True))


def _expand_constraints(constraints, n: int) -> tuple[frozenset[int], ...]:
    items = list(constraints)
    if items and isinstance(items[0], (int, np.integer)):
        return tuple(frozenset(int(c) for c in items) for _ in range(n))
    if len(items) != n:
        raise FamilyError(f"expected {n} constraint sets, got {len(items)}")
    return tuple(frozenset(int(c) for c in cs) for cs in items)


def _u8(value: float) -> int:
    return int(round(np.clip(value, 0.0, 1.0) * 255.0))
