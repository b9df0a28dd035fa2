"""Block grids, merged index strings and the ``<think>/<answer>`` wrapper.

A scene of ``image_h x image_w`` pixels is cut into ``rows x cols`` equal
blocks indexed in row-major order.  The set of changed blocks travels as a
run string such as ``"0-2,5,7"``, and is rasterized back into a coarse mask.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


class ParseError(ValueError):
    """A run string that cannot be read; ``offset`` is a UTF-8 byte offset."""

    def __init__(self, reason: str, offset: int, text: str = ""):
        self.reason = reason
        self.offset = offset
        self.text = text
        super().__init__(f"{reason} at byte {offset} in {text!r}")


class FormatError(ValueError):
    """Tagged output that does not follow the think-then-answer layout."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


@dataclass(frozen=True)
class GridSpec:
    rows: int = 8
    cols: int = 8
    image_h: int = 64
    image_w: int = 64

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must have at least one row and column, got {self.rows}x{self.cols}")
        if self.image_h % self.rows or self.image_w % self.cols:
            raise ValueError(
                f"image {self.image_h}x{self.image_w} is not divisible into a {self.rows}x{self.cols} grid"
            )

    @property
    def n_blocks(self) -> int:
        return self.rows * self.cols

    @property
    def block_h(self) -> int:
        return self.image_h // self.rows

    @property
    def block_w(self) -> int:
        return self.image_w // self.cols

    @classmethod
    def parse(cls, text: str, image_h: int = 64, image_w: int = 64) -> "GridSpec":
        """Build from a ``"8x8"`` style string."""
        m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
        if not m:
            raise ValueError(f"grid must look like RxC, got {text!r}")
        return cls(int(m.group(1)), int(m.group(2)), image_h, image_w)


@dataclass(frozen=True)
class BlockLabelSet:
    grid: GridSpec
    changed: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "changed", frozenset(int(i) for i in self.changed))
        bad = [i for i in self.changed if not 0 <= i < self.grid.n_blocks]
        if bad:
            raise ValueError(f"block indices {sorted(bad)} outside [0, {self.grid.n_blocks})")

    def __len__(self) -> int:
        return len(self.changed)

    def __contains__(self, idx) -> bool:
        return idx in self.changed

    def sorted(self) -> list[int]:
        return sorted(self.changed)

    def to_bitmap(self) -> np.ndarray:
        flat = np.zeros(self.grid.n_blocks, dtype=np.uint8)
        flat[list(self.changed)] = 1
        return flat.reshape(self.grid.rows, self.grid.cols)

    def to_vector(self) -> np.ndarray:
        return self.to_bitmap().reshape(-1).astype(np.float64)

    @classmethod
    def from_bitmap(cls, grid: GridSpec, bitmap) -> "BlockLabelSet":
        flat = np.asarray(bitmap).reshape(-1)
        if flat.size != grid.n_blocks:
            raise ValueError(f"bitmap has {flat.size} cells, grid has {grid.n_blocks} blocks")
        return cls(grid, frozenset(np.flatnonzero(flat).tolist()))

    def with_block(self, idx: int) -> "BlockLabelSet":
        return BlockLabelSet(self.grid, self.changed | {idx})


@dataclass(frozen=True)
class StructuredOutput:
    think: str
    answer: str
    raw: str


def _check_mask(mask: np.ndarray, grid: GridSpec) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != (grid.image_h, grid.image_w):
        raise ValueError(f"mask shape {mask.shape} does not match grid image {(grid.image_h, grid.image_w)}")
    return mask


def block_labels_from_mask(mask, grid: GridSpec, tau: float = 0.0) -> BlockLabelSet:
    """Blocks whose changed-pixel fraction is strictly above ``tau``."""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must be in [0, 1), got {tau}")
    mask = _check_mask(mask, grid) != 0
    frac = mask.reshape(grid.rows, grid.block_h, grid.cols, grid.block_w).mean(axis=(1, 3))
    return BlockLabelSet.from_bitmap(grid, frac > tau)


def coarse_mask_from_blocks(labels: BlockLabelSet) -> np.ndarray:
    g = labels.grid
    return np.kron(labels.to_bitmap(), np.ones((g.block_h, g.block_w), dtype=np.uint8))


def serialize_runs(labels: BlockLabelSet | Iterable[int]) -> str:
    """Render maximal runs of consecutive indices as ``a-b``, singletons as ``n``."""
    idx = sorted(labels.changed if isinstance(labels, BlockLabelSet) else set(labels))
    items = []
    i = 0
    while i < len(idx):
        j = i
        while j + 1 < len(idx) and idx[j + 1] == idx[j] + 1:
            j += 1
        items.append(str(idx[i]) if i == j else f"{idx[i]}-{idx[j]}")
        i = j + 1
    return ",".join(items)


_RANGE_DASHES = "-−–"
_ITEM = re.compile(r"(\d+)(?:\s*([" + _RANGE_DASHES + r"])\s*(\d+))?")


def parse_runs(text: str, grid: GridSpec, strict: bool = False) -> BlockLabelSet:
    """Expand a run string into a block set.

    The tolerant mode accepts unsorted items, overlapping or adjacent runs,
    surrounding whitespace, unicode minus/en-dash ranges and the literal
    ``none``; ``strict=True`` accepts only the canonical rendering.
    """
    def fail(reason: str, char_pos: int):
        raise ParseError(reason, len(text[:char_pos].encode("utf-8")), text)

    if not strict and text.strip().lower() in ("", "none"):
        return BlockLabelSet(grid)
    if strict and text == "":
        return BlockLabelSet(grid)

    changed: set[int] = set()
    pos = 0
    for piece in text.split(","):
        start = pos
        pos += len(piece) + 1
        lead = len(piece) - len(piece.lstrip())
        body = piece.strip()
        at = start + lead
        if not body:
            fail("empty item", at)
        if body[0] in _RANGE_DASHES:
            fail("negative index", at)
        m = _ITEM.fullmatch(body)
        if not m:
            fail(f"malformed item {body!r}", at)
        a = int(m.group(1))
        b = int(m.group(3)) if m.group(3) is not None else a
        if m.group(3) is not None and a >= b:
            fail(f"reversed range {a}-{b}", at)
        if b >= grid.n_blocks:
            fail(f"index {b} out of range for {grid.n_blocks} blocks", at)
        changed.update(range(a, b + 1))

    labels = BlockLabelSet(grid, frozenset(changed))
    if strict:
        canon = serialize_runs(labels)
        if canon != text:
            diff = next((i for i, (x, y) in enumerate(zip(text, canon)) if x != y), min(len(text), len(canon)))
            fail(f"non-canonical run string (expected {canon!r})", diff)
    return labels


_TAG = re.compile(r"</?(think|answer)>")


def extract_structured(raw: str) -> StructuredOutput:
    """Split ``<think>..</think><answer>..</answer>``; only whitespace may surround the blocks."""
    tags = [(m.group(0), m.start(), m.end()) for m in _TAG.finditer(raw)]
    names = [t[0] for t in tags]
    for tag in ("<think>", "</think>", "<answer>", "</answer>"):
        count = names.count(tag)
        if count == 0:
            kind = "think" if "think" in tag else "answer"
            what = "unclosed" if tag.startswith("</") and f"<{kind}>" in names else "missing"
            raise FormatError(f"{what} {kind} tag")
        if count > 1:
            raise FormatError(f"duplicate {tag.strip('</>')} tag")
    if names != ["<think>", "</think>", "<answer>", "</answer>"]:
        if names.index("<answer>") < names.index("<think>"):
            raise FormatError("answer before think")
        raise FormatError("misordered tags")
    (_, _, t_open), (_, t_close, t_end), (_, a_start, a_open), (_, a_close, a_end) = tags
    if raw[:tags[0][1]].strip() or raw[t_end:a_start].strip() or raw[a_end:].strip():
        raise FormatError("text outside think/answer blocks")
    return StructuredOutput(think=raw[t_open:t_close], answer=raw[a_open:a_close].strip(), raw=raw)


def render_structured(think: str, answer: str) -> str:
    return f"<think>{think}</think><answer>{answer}</answer>"
