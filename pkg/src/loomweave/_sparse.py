"""Fixed sparse linear maps with a differentiable dense operand.

Splatting and triplane sampling are both linear in the features once the
camera geometry is fixed, so each is built as a CSR matrix. The transpose is
materialized too, which keeps the backward pass a single sparse product.
"""

from __future__ import annotations

import warnings

import torch



class _SpMM(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, matrix, transpose):
        ctx.transpose = transpose
        return matrix @ x

    @staticmethod
    def backward(ctx, grad):
        return ctx.transpose @ grad.contiguous(), None, None


def _csr(rows, cols, vals, shape):
    # duplicate (row, col) entries are left in place; the CSR product adds them
    order = torch.argsort(rows, stable=True)
    counts = torch.bincount(rows, minlength=shape[0])
    crow = torch.zeros(shape[0] + 1, dtype=torch.int64)
    torch.cumsum(counts, 0, out=crow[1:])
    return _new_csr(crow, cols[order], vals[order], shape)


def _new_csr(crow, cols, vals, shape):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # beta-state notice
        return torch.sparse_csr_tensor(crow, cols, vals, shape, check_invariants=False)


def _csr_block_diag(mats):
    crows, cols, vals = [], [], []
    nnz = r = c = 0
    for m in mats:
        crow = m.crow_indices()
        crows.append((crow if not crows else crow[1:]) + nnz)
        cols.append(m.col_indices() + c)
        vals.append(m.values())
        nnz += int(crow[-1])
        r += m.shape[0]
        c += m.shape[1]
    return _new_csr(torch.cat(crows), torch.cat(cols), torch.cat(vals), (r, c))


class SparseOperator:
    """Matrix of shape (R, K) given by (row, col, value) triplets; duplicates add."""

    def __init__(self, rows: torch.Tensor, cols: torch.Tensor, vals: torch.Tensor, shape: tuple[int, int]):
        rows, cols, vals = rows.reshape(-1).long(), cols.reshape(-1).long(), vals.reshape(-1)
        self.shape = tuple(int(s) for s in shape)
        self.matrix = _csr(rows, cols, vals, self.shape)
        self.transpose = _csr(cols, rows, vals, self.shape[::-1])

    @classmethod
    def _wrap(cls, matrix, transpose):
        op = cls.__new__(cls)
        op.shape = tuple(matrix.shape)
        op.matrix, op.transpose = matrix, transpose
        return op

    @classmethod
    def block_diag(cls, ops: list["SparseOperator"]) -> "SparseOperator":
        if len(ops) == 1:
            return ops[0]
        return cls._wrap(_csr_block_diag([o.matrix for o in ops]), _csr_block_diag([o.transpose for o in ops]))

    @property
    def dtype(self):
        return self.matrix.dtype

    def __matmul__(self, x: torch.Tensor) -> torch.Tensor:
        if x.dtype != self.dtype:
            raise TypeError(f"operator is {self.dtype}, operand is {x.dtype}")
        return _SpMM.apply(x.contiguous(), self.matrix, self.transpose)

    def row_sums(self) -> torch.Tensor:
        ones = torch.ones(self.shape[1], 1, dtype=self.dtype)
        return (self.matrix @ ones).squeeze(-1)
