"""First-fit free-space map over row-aligned extents."""

from bisect import bisect_left


class OutOfSpace(RuntimeError):
    pass


class DoubleFree(RuntimeError):
    """Freeing rows that are already free."""


class FreeSpaceMap:
    """Sorted, disjoint, coalesced ``(start_row, nrows)`` extents."""

    def __init__(self, total_rows: int, extents=None):
        self.total_rows = total_rows
        if extents is None:
            extents = [(0, total_rows)] if total_rows else []
        self._starts = [s for s, _ in extents]
        self._lens = [n for _, n in extents]

    @classmethod
    def from_allocated(cls, total_rows: int, allocated) -> "FreeSpaceMap":
        """Complement of a set of allocated extents; overlaps are an error."""
        extents = []
        cursor = 0
        for start, n in sorted(allocated):
            if start < cursor:
                raise DoubleFree(f"allocated extents overlap at row {start}")
            if start > cursor:
                extents.append((cursor, start - cursor))
            cursor = start + n
        if cursor > total_rows:
            raise ValueError("allocated extent beyond data region")
        if cursor < total_rows:
            extents.append((cursor, total_rows - cursor))
        return cls(total_rows, extents)

    def copy(self) -> "FreeSpaceMap":
        return FreeSpaceMap(self.total_rows, self.extents)

    @property
    def extents(self) -> list:
        return list(zip(self._starts, self._lens))

    def free_rows(self) -> int:
        return sum(self._lens)

    def alloc(self, nrows: int) -> int:
        if nrows <= 0:
            raise ValueError("allocation must be positive")
        for i, n in enumerate(self._lens):
            if n >= nrows:
                start = self._starts[i]
                if n == nrows:
                    del self._starts[i]
                    del self._lens[i]
                else:
                    self._starts[i] = start + nrows
                    self._lens[i] = n - nrows
                return start
        raise OutOfSpace(f"no free extent of {nrows} rows")

    def is_free(self, start: int, nrows: int) -> bool:
        i = bisect_left(self._starts, start + 1) - 1
        return i >= 0 and self._starts[i] + self._lens[i] >= start + nrows

    def free(self, start: int, nrows: int) -> None:
        end = start + nrows
        if start < 0 or end > self.total_rows:
            raise ValueError(f"extent [{start}, {end}) outside data region")
        i = bisect_left(self._starts, start)
        if i > 0 and self._starts[i - 1] + self._lens[i - 1] > start:
            raise DoubleFree(f"rows [{start}, {end}) already free")
        if i < len(self._starts) and self._starts[i] < end:
            raise DoubleFree(f"rows [{start}, {end}) already free")
        merge_left = i > 0 and self._starts[i - 1] + self._lens[i - 1] == start
        merge_right = i < len(self._starts) and self._starts[i] == end
        if merge_left and merge_right:
            self._lens[i - 1] += nrows + self._lens[i]
            del self._starts[i]
            del self._lens[i]
        elif merge_left:
            self._lens[i - 1] += nrows
        elif merge_right:
            self._starts[i] = start
            self._lens[i] += nrows
        else:
            self._starts.insert(i, start)
            self._lens.insert(i, nrows)
