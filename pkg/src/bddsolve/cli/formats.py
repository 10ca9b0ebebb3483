"""File formats: BDDM text block matrices, BDDG connection graphs, RHS
vectors, and the BDDC1 / BDDU1 binary containers.

Binary layout (little-endian): 5-byte magic, uint64 header length, a UTF-8
JSON header, then the raw arrays back to back.  The header lists every array
with its dtype, shape and byte offset, plus scalar metadata and the block
counts of every stored sparse piece.
"""

from __future__ import annotations

import json

import numpy as np
import scipy.sparse as sp

from ..block_core import BlockDiagonalMatrix, BlockSparseMatrix
from ..builder import UDUFactorization, UDULevel
from ..chain import ChainLevel, SchurComplementChain
from ..errors import InvalidInputError, ParseError
from ..generators import ConnectionGraph, connection_laplacian
from ..jacobi import JacobiOperator

UNITARY_TOL = 1e-8
FMT = "{:.17g}"


# ---------------------------------------------------------------------------
# text helpers


def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if line:
                yield line


def _floats(tokens, what):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"bad number in {what}: {exc}") from None


def _blocks_from_floats(vals, r):
    a = np.asarray(vals, dtype=float).reshape(r * r, 2)
    return (a[:, 0] + 1j * a[:, 1]).reshape(r, r)


def _block_tokens(b):
    out = []
    for z in np.asarray(b).ravel():
        out.append(FMT.format(z.real))
        out.append(FMT.format(z.imag))
    return " ".join(out)


def _header(it, magic, count):
    try:
        head = next(it).split()
    except StopIteration:
        raise ParseError("empty file") from None
    if head[0] != magic or len(head) != count + 1:
        raise ParseError(f"expected header '{magic}' with {count} fields")
    try:
        vals = [int(x) for x in head[1:]]
    except ValueError:
        raise ParseError("non-integer header field") from None
    if any(v < 0 for v in vals) or vals[1] < 1:
        raise ParseError("invalid header values")
    return vals


# ---------------------------------------------------------------------------
# BDDM block matrices


def read_matrix(path) -> BlockSparseMatrix:
    it = _lines(path)
    n, r, nnz = _header(it, "BDDM", 3)
    rows, cols, blocks = [], [], []
    for k in range(nnz):
        try:
            tok = next(it).split()
        except StopIteration:
            raise ParseError(f"expected {nnz} blocks, found {k}") from None
        if len(tok) != 2 + 2 * r * r:
            raise ParseError(f"block line {k + 1} has {len(tok)} fields")
        try:
            i, j = int(tok[0]), int(tok[1])
        except ValueError:
            raise ParseError(f"bad index on block line {k + 1}") from None
        if not (0 <= i < n and 0 <= j < n):
            raise ParseError(f"index out of range on block line {k + 1}")
        b = _blocks_from_floats(_floats(tok[2:], "block"), r)
        if i > j:
            i, j, b = j, i, b.conj().T
        rows.append(i)
        cols.append(j)
        blocks.append(b)
    if next(it, None) is not None:
        raise ParseError("trailing data after the declared blocks")
    blocks = np.array(blocks, dtype=complex).reshape(-1, r, r)
    if not np.all(np.isfinite(blocks)):
        raise ParseError("non-finite entry")
    return BlockSparseMatrix.from_coo(n, r, rows, cols, blocks, mode="mirror_upper",
                                      drop_rtol=0.0)


def write_matrix(M: BlockSparseMatrix, path):
    rows, cols, blocks = M.upper_entries()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"BDDM {M.n} {M.r} {len(rows)}\n")
        for i, j, b in zip(rows, cols, blocks):
            fh.write(f"{i} {j} {_block_tokens(b)}\n")


# ---------------------------------------------------------------------------
# BDDG connection graphs


def read_graph(path) -> ConnectionGraph:
    it = _lines(path)
    n, r, m = _header(it, "BDDG", 3)
    u = np.zeros(m, np.int64)
    v = np.zeros(m, np.int64)
    w = np.zeros(m)
    O = np.zeros((m, r, r), complex)
    for k in range(m):
        try:
            tok = next(it).split()
        except StopIteration:
            raise ParseError(f"expected {m} edges, found {k}") from None
        if len(tok) != 3 + 2 * r * r:
            raise ParseError(f"edge line {k + 1} has {len(tok)} fields")
        try:
            u[k], v[k] = int(tok[0]), int(tok[1])
        except ValueError:
            raise ParseError(f"bad vertex on edge line {k + 1}") from None
        vals = _floats(tok[2:], "edge")
        w[k] = vals[0]
        O[k] = _blocks_from_floats(vals[1:], r)
    if next(it, None) is not None:
        raise ParseError("trailing data after the declared edges")
    if np.any((u < 0) | (u >= n) | (v < 0) | (v >= n)):
        raise ParseError("vertex index out of range")
    if np.any(u == v):
        raise InvalidInputError("self-loop in connection graph")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidInputError("edge weights must be finite and nonnegative")
    if m:
        dev = np.linalg.norm(O @ np.conj(np.swapaxes(O, 1, 2)) - np.eye(r), ord=2, axis=(1, 2))
        if np.any(~np.isfinite(dev)) or dev.max() > UNITARY_TOL:
            bad = int(np.nanargmax(np.where(np.isfinite(dev), dev, np.inf)))
            raise InvalidInputError(f"edge {bad} block is not unitary")
    return ConnectionGraph(n, r, u, v, w, O)


def write_graph(g: ConnectionGraph, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"BDDG {g.n} {g.r} {g.m}\n")
        for a, b, ww, o in zip(g.u, g.v, g.w, g.O):
            fh.write(f"{a} {b} {FMT.format(ww)} {_block_tokens(o)}\n")


def write_planted(g: ConnectionGraph, path):
    with open(path, "w", encoding="utf-8") as fh:
        for U in g.planted:
            fh.write(_block_tokens(U) + "\n")


def assemble_connection_laplacian(path) -> BlockSparseMatrix:
    return connection_laplacian(read_graph(path))


def read_any_matrix(path) -> BlockSparseMatrix:
    """BDDM files directly; BDDG files through the connection Laplacian."""
    with open(path, encoding="utf-8") as fh:
        first = ""
        for line in fh:
            first = line.split("#", 1)[0].strip()
            if first:
                break
    if first.startswith("BDDG"):
        return assemble_connection_laplacian(path)
    return read_matrix(path)


# ---------------------------------------------------------------------------
# RHS vectors: one complex per line ("re im", "re" or a Python literal)


def read_vector(path, n, r):
    vals = []
    for line in _lines(path):
        tok = line.split()
        try:
            if len(tok) == 2:
                vals.append(complex(float(tok[0]), float(tok[1])))
            elif len(tok) == 1:
                vals.append(complex(tok[0]))
            else:
                raise ValueError(line)
        except ValueError:
            raise ParseError(f"bad vector entry: {line!r}") from None
    if len(vals) != n * r:
        raise ParseError(f"expected {n * r} entries, found {len(vals)}")
    return np.array(vals, dtype=complex).reshape(n, r)


def write_vector(x, path):
    with open(path, "w", encoding="utf-8") as fh:
        for z in np.asarray(x).ravel():
            fh.write(f"{FMT.format(z.real)} {FMT.format(z.imag)}\n")


def read_index_list(path):
    out = []
    for line in _lines(path):
        for t in line.split():
            try:
                out.append(int(t))
            except ValueError:
                raise ParseError(f"bad index {t!r}") from None
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# binary containers


class _Packer:
    def __init__(self):
        self.arrays = []
        self.index = {}
        self.offset = 0

    def put(self, name, arr):
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in "|" else arr.dtype
        arr = arr.astype(dt, copy=False)
        self.index[name] = {"dtype": dt.str, "shape": list(arr.shape), "offset": self.offset}
        self.arrays.append(arr)
        self.offset += arr.nbytes

    def put_csr(self, name, A):
        A = sp.csr_matrix(A)
        A.sort_indices()
        self.put(name + ".data", A.data.astype(complex))
        self.put(name + ".indices", A.indices.astype(np.int64))
        self.put(name + ".indptr", A.indptr.astype(np.int64))
        self.index[name + ".shape"] = list(A.shape)

    def put_block(self, name, M: BlockSparseMatrix):
        self.put(name + ".indptr", M.indptr)
        self.put(name + ".indices", M.indices)
        self.put(name + ".data", M.data)
        self.index[name + ".n"] = M.n

    def write(self, path, magic, meta):
        header = json.dumps({"meta": meta, "arrays": self.index}, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(magic)
            fh.write(np.uint64(len(header)).astype("<u8").tobytes())
            fh.write(header)
            for a in self.arrays:
                fh.write(a.tobytes())


class _Unpacker:
    def __init__(self, path, magic):
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:5] != magic:
            raise ParseError(f"not a {magic.decode()} container")
        try:
            hlen = int(np.frombuffer(raw[5:13], dtype="<u8")[0])
            head = json.loads(raw[13:13 + hlen].decode())
        except (ValueError, IndexError, UnicodeDecodeError) as exc:
            raise ParseError(f"corrupt container header: {exc}") from None
        self.meta = head["meta"]
        self.index = head["arrays"]
        self.body = memoryview(raw)[13 + hlen:]

    def get(self, name):
        info = self.index[name]
        dt = np.dtype(info["dtype"])
        count = int(np.prod(info["shape"], dtype=np.int64))
        start = info["offset"]
        if start + count * dt.itemsize > len(self.body):
            raise ParseError("container is truncated")
        arr = np.frombuffer(self.body, dtype=dt, count=count, offset=start)
        return arr.reshape(info["shape"]).astype(dt.newbyteorder("="), copy=True)

    def get_csr(self, name):
        return sp.csr_matrix((self.get(name + ".data"), self.get(name + ".indices"),
                              self.get(name + ".indptr")), shape=tuple(self.index[name + ".shape"]))

    def get_block(self, name, r):
        return BlockSparseMatrix(int(self.index[name + ".n"]), r, self.get(name + ".indptr"),
                                 self.get(name + ".indices"), self.get(name + ".data"))


_VOLATILE = frozenset({"seconds"})


def _jsonable(meta):
    """JSON-safe copy of ``meta`` without wall-clock fields, so that equal
    seeds give byte-identical files."""
    def strip(o):
        if isinstance(o, dict):
            return {k: strip(v) for k, v in o.items() if k not in _VOLATILE}
        if isinstance(o, list):
            return [strip(v) for v in o]
        return o
    raw = json.loads(json.dumps(meta, default=lambda o: o.item() if hasattr(o, "item") else str(o)))
    return strip(raw)


def save_chain(chain: SchurComplementChain, path):
    p = _Packer()
    lv_meta = []
    for i, lvl in enumerate(chain.levels):
        pre = f"L{i}"
        for name in ("F", "C", "f_pos", "c_pos"):
            p.put(f"{pre}.{name}", getattr(lvl, name).astype(np.int64))
        p.put(f"{pre}.X", lvl.Z.X.blocks)
        p.put_block(f"{pre}.L", lvl.Z.L)
        p.put_csr(f"{pre}.M_CF", lvl.M_CF)
        lv_meta.append({"k": int(lvl.Z.k), "epsilon": float(lvl.epsilon),
                        "z_epsilon": float(lvl.Z.epsilon), "blocks_L": int(lvl.Z.L.nnz),
                        "nF": int(len(lvl.F)), "nC": int(len(lvl.C))})
    p.put("terminal.labels", chain.terminal_labels.astype(np.int64))
    p.put("terminal.matrix", np.asarray(chain.terminal_matrix, dtype=complex))
    p.put("terminal.factor", np.asarray(chain.terminal_factor, dtype=complex))
    meta = {"version": 1, "n": chain.n, "r": chain.r, "levels": lv_meta,
            "info": _jsonable({k: v for k, v in chain.meta.items() if k != "terminal_sparse"})}
    p.write(path, b"BDDC1", meta)


def load_chain(path) -> SchurComplementChain:
    u = _Unpacker(path, b"BDDC1")
    m = u.meta
    r = int(m["r"])
    levels = []
    for i, lm in enumerate(m["levels"]):
        pre = f"L{i}"
        Z = JacobiOperator(BlockDiagonalMatrix(u.get(f"{pre}.X")), u.get_block(f"{pre}.L", r),
                           int(lm["k"]), float(lm["z_epsilon"]))
        levels.append(ChainLevel(
            F=u.get(f"{pre}.F"), C=u.get(f"{pre}.C"), f_pos=u.get(f"{pre}.f_pos"),
            c_pos=u.get(f"{pre}.c_pos"), Z=Z, M_CF=u.get_csr(f"{pre}.M_CF"),
            epsilon=float(lm["epsilon"])))
    t = u.get("terminal.matrix")
    return SchurComplementChain(int(m["n"]), r, levels, u.get("terminal.labels"), t,
                                terminal_factor=u.get("terminal.factor"), meta=m.get("info", {}))


def save_udu(f: UDUFactorization, path):
    p = _Packer()
    lv_meta = []
    for i, lvl in enumerate(f.levels):
        pre = f"L{i}"
        for name in ("F", "C", "f_pos", "c_pos"):
            p.put(f"{pre}.{name}", getattr(lvl, name).astype(np.int64))
        p.put(f"{pre}.X", lvl.X.blocks)
        p.put_csr(f"{pre}.U_FC", lvl.U_FC)
        lv_meta.append({"nF": int(len(lvl.F)), "nC": int(len(lvl.C)),
                        "nnz_U_FC": int(lvl.U_FC.nnz)})
    p.put("terminal.labels", f.terminal_labels.astype(np.int64))
    p.put("terminal.D", np.asarray(f.terminal_D, dtype=complex))
    p.put("terminal.U", np.asarray(f.terminal_U, dtype=complex))
    meta = {"version": 1, "n": f.n, "r": f.r, "levels": lv_meta,
            "info": _jsonable(f.meta)}
    p.write(path, b"BDDU1", meta)


def load_udu(path) -> UDUFactorization:
    u = _Unpacker(path, b"BDDU1")
    m = u.meta
    levels = []
    for i, _ in enumerate(m["levels"]):
        pre = f"L{i}"
        levels.append(UDULevel(u.get(f"{pre}.f_pos"), u.get(f"{pre}.c_pos"), u.get(f"{pre}.F"),
                               u.get(f"{pre}.C"), BlockDiagonalMatrix(u.get(f"{pre}.X")),
                               u.get_csr(f"{pre}.U_FC")))
    return UDUFactorization(int(m["n"]), int(m["r"]), levels, u.get("terminal.labels"),
                            u.get("terminal.D"), u.get("terminal.U"), meta=m.get("info", {}))


def dumps_stats(stats) -> str:
    return json.dumps(_jsonable(stats), indent=2, sort_keys=True)


__all__ = [
    "read_matrix", "write_matrix", "read_graph", "write_graph", "write_planted",
    "assemble_connection_laplacian", "read_any_matrix", "read_vector", "write_vector",
    "read_index_list", "save_chain", "load_chain", "save_udu", "load_udu", "dumps_stats",
]
