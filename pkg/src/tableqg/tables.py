"""Table values, partial-table selection and markdown serialization.

Rows are tuples of strings and may be ragged. The serializer pads short rows
to the widest row and never rewrites cell text, so every cell value appears
verbatim in the output (including ``|`` and placeholder values such as
``nan`` or ``Unnamed: 0``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence, Union

Row = tuple[str, ...]

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class BudgetTooSmall(ValueError):
    """Raised when a token budget cannot hold even the first row of a table."""


@dataclass(frozen=True)
class Table:
    id: str
    rows: tuple[Row, ...]
    title: str | None = None
    sheet_name: str | None = None
    # (source path, format tag); not part of table identity
    provenance: tuple[str, str] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        # accept lists from callers, store immutably
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        for i, row in enumerate(self.rows):
            if not row:
                raise ValueError(f"table {self.id!r}: row {i} has no cells")

    @property
    def n_rows(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class TopKRows:
    k: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class TokenBudget:
    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("token budget must be >= 1")


Strategy = Union[TopKRows, TokenBudget]


@dataclass(frozen=True)
class PartialTable:
    source_id: str
    rows: tuple[Row, ...]
    strategy: Strategy
    title: str | None = None
    sheet_name: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))

    @classmethod
    def full(cls, table: Table) -> PartialTable:
        """Wrap a whole table as a partial table (all rows kept)."""
        return cls(table.id, table.rows, TopKRows(max(1, table.n_rows)), table.title, table.sheet_name)


class TokenCounter(Protocol):
    def count(self, text: str) -> int: ...


class RegexTokenCounter:
    """Whitespace and punctuation segmentation.

    A token is either a run of word characters or a single punctuation
    character. Stands in for a model tokenizer; anything with a ``count``
    method can replace it.
    """

    def tokenize(self, text: str) -> list[str]:
        return _TOKEN_RE.findall(text)

    def count(self, text: str) -> int:
        return sum(1 for _ in _TOKEN_RE.finditer(text))


DEFAULT_COUNTER = RegexTokenCounter()


def tokenize(text: str) -> list[str]:
    return DEFAULT_COUNTER.tokenize(text)


def count_tokens(text: str, counter: TokenCounter | None = None) -> int:
    return (counter or DEFAULT_COUNTER).count(text)


def select_top_rows(table: Table, k: int) -> PartialTable:
    """Keep the first ``k`` rows of ``table`` in their original order."""
    strategy = TopKRows(k)
    return PartialTable(table.id, table.rows[:k], strategy, table.title, table.sheet_name)


def title_line(title: str | None, sheet_name: str | None) -> str | None:
    if not title:
        return None
    return f"{title} - {sheet_name}" if sheet_name else title


def _render_row(cells: Sequence[str], width: int) -> str:
    padded = list(cells) + [""] * (width - len(cells))
    return "|" + "|".join(f" {c} " for c in padded) + "|"


def render_grid(rows: Sequence[Sequence[str]]) -> str:
    """Pipe-delimited grid; the first row doubles as the markdown header."""
    if not rows:
        return ""
    width = max(len(r) for r in rows)
    lines = [_render_row(rows[0], width), "|" + "|".join(" --- " for _ in range(width)) + "|"]
    lines.extend(_render_row(r, width) for r in rows[1:])
    return "\n".join(lines)


def to_markdown(pt: PartialTable | Table, include_title: bool = False) -> str:
    grid = render_grid(pt.rows)
    head = title_line(pt.title, pt.sheet_name) if include_title else None
    if head is None:
        return grid
    return f"{head}\n{grid}" if grid else head


def truncate_by_tokens(
    table: Table,
    budget: int,
    include_title: bool = False,
    counter: TokenCounter | None = None,
) -> PartialTable:
    """Greedy whole-row prefix packing under a token budget.

    Returns the longest row prefix whose serialization fits ``budget``.
    Raises :class:`BudgetTooSmall` when the first row alone does not fit.
    """
    counter = counter or DEFAULT_COUNTER
    strategy = TokenBudget(budget)

    def fits(m: int) -> bool:
        pt = PartialTable(table.id, table.rows[:m], strategy, table.title, table.sheet_name)
        return counter.count(to_markdown(pt, include_title)) <= budget

    if not table.rows or not fits(1):
        raise BudgetTooSmall(f"table {table.id!r}: budget {budget} cannot hold the first row")
    # Padding width grows with the prefix, so token count is monotone in m
    # and binary search finds the maximal fitting prefix.
    lo, hi = 1, table.n_rows
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid - 1
    return PartialTable(table.id, table.rows[:lo], strategy, table.title, table.sheet_name)
