# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled tape executor: per-sample forward and reverse sweeps in C.

Runs the identical instruction stream as the numpy executor in
``servolag.autodiff.tape``; kept in lock-step with the opcode table there.
"""

import numpy as np

from libc.math cimport exp, log1p
from libc.string cimport memcpy, memset

DEF ADD = 0
DEF MATMUL = 1
DEF HAD = 2
DEF SCALE = 3
DEF TRANS = 4
DEF SOFTPLUS = 5
DEF RELU = 6
DEF SIGMOID = 7
DEF SUM = 8
DEF SQUARE = 9
DEF SELECT = 10
DEF COPYAT = 11
DEF RECIP = 12


cdef inline double _softplus(double x) nogil:
    if x > 0.0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef void _forward(const int[:, ::1] ins, const double[::1] insf,
                   const int[::1] soff, double* w, Py_ssize_t n_ins) nogil:
    cdef Py_ssize_t k, i, j, t
    cdef int op, m, n, p, case, numel
    cdef double acc, g
    cdef double *o
    cdef double *a
    cdef double *b
    cdef double *c
    for k in range(n_ins):
        op = ins[k, 0]
        o = w + soff[ins[k, 1]]
        a = w + soff[ins[k, 2]] if ins[k, 2] >= 0 else NULL
        b = w + soff[ins[k, 3]] if ins[k, 3] >= 0 else NULL
        c = w + soff[ins[k, 4]] if ins[k, 4] >= 0 else NULL
        if op == ADD:
            numel = ins[k, 5]
            for t in range(numel):
                o[t] = a[t] + b[t]
        elif op == MATMUL:
            m = ins[k, 5]
            n = ins[k, 6]
            p = ins[k, 7]
            if m > 0 and p > 0:
                for i in range(m):
                    for j in range(p):
                        acc = 0.0
                        for t in range(n):
                            acc += a[i * n + t] * b[t * p + j]
                        o[i * p + j] = acc
            elif m > 0:
                for i in range(m):
                    acc = 0.0
                    for t in range(n):
                        acc += a[i * n + t] * b[t]
                    o[i] = acc
            elif p > 0:
                for j in range(p):
                    acc = 0.0
                    for t in range(n):
                        acc += a[t] * b[t * p + j]
                    o[j] = acc
            else:
                acc = 0.0
                for t in range(n):
                    acc += a[t] * b[t]
                o[0] = acc
        elif op == HAD:
            case = ins[k, 5]
            numel = ins[k, 6]
            if case == 0:
                for t in range(numel):
                    o[t] = a[t] * b[t]
            elif case == 1:
                for t in range(numel):
                    o[t] = a[0] * b[t]
            else:
                for t in range(numel):
                    o[t] = a[t] * b[0]
        elif op == SCALE:
            numel = ins[k, 5]
            g = insf[k]
            for t in range(numel):
                o[t] = a[t] * g
        elif op == TRANS:
            m = ins[k, 5]
            n = ins[k, 6]
            for i in range(m):
                for j in range(n):
                    o[j * m + i] = a[i * n + j]
        elif op == SOFTPLUS:
            numel = ins[k, 5]
            for t in range(numel):
                o[t] = _softplus(a[t])
        elif op == RELU:
            numel = ins[k, 5]
            for t in range(numel):
                o[t] = a[t] if a[t] > 0.0 else 0.0
        elif op == SIGMOID:
            numel = ins[k, 5]
            for t in range(numel):
                o[t] = _sigmoid(a[t])
        elif op == SUM:
            numel = ins[k, 5]
            acc = 0.0
            for t in range(numel):
                acc += a[t]
            o[0] = acc
        elif op == SQUARE:
            numel = ins[k, 5]
            for t in range(numel):
                o[t] = a[t] * a[t]
        elif op == SELECT:
            numel = ins[k, 5]
            for t in range(numel):
                o[t] = b[t] if a[t] > 0.0 else c[t]
        elif op == COPYAT:
            numel = ins[k, 6]
            memcpy(o + ins[k, 5], a, numel * sizeof(double))
        elif op == RECIP:
            numel = ins[k, 5]
            for t in range(numel):
                o[t] = 1.0 / a[t]


cdef void _backward(const int[:, ::1] ins, const double[::1] insf,
                    const int[::1] soff, double* w, double* ct,
                    Py_ssize_t n_ins) nogil:
    cdef Py_ssize_t k, i, j, t
    cdef int op, m, n, p, case, numel
    cdef double s, gv
    cdef double *go
    cdef double *a
    cdef double *b
    cdef double *ca
    cdef double *cb
    cdef double *cc
    for k in range(n_ins - 1, -1, -1):
        op = ins[k, 0]
        go = ct + soff[ins[k, 1]]
        a = w + soff[ins[k, 2]] if ins[k, 2] >= 0 else NULL
        b = w + soff[ins[k, 3]] if ins[k, 3] >= 0 else NULL
        ca = ct + soff[ins[k, 2]] if ins[k, 2] >= 0 else NULL
        cb = ct + soff[ins[k, 3]] if ins[k, 3] >= 0 else NULL
        cc = ct + soff[ins[k, 4]] if ins[k, 4] >= 0 else NULL
        if op == ADD:
            numel = ins[k, 5]
            for t in range(numel):
                ca[t] += go[t]
                cb[t] += go[t]
        elif op == MATMUL:
            m = ins[k, 5]
            n = ins[k, 6]
            p = ins[k, 7]
            if m > 0 and p > 0:
                for i in range(m):
                    for j in range(p):
                        gv = go[i * p + j]
                        if gv != 0.0:
                            for t in range(n):
                                ca[i * n + t] += gv * b[t * p + j]
                                cb[t * p + j] += gv * a[i * n + t]
            elif m > 0:
                for i in range(m):
                    gv = go[i]
                    if gv != 0.0:
                        for t in range(n):
                            ca[i * n + t] += gv * b[t]
                            cb[t] += gv * a[i * n + t]
            elif p > 0:
                for j in range(p):
                    gv = go[j]
                    if gv != 0.0:
                        for t in range(n):
                            ca[t] += gv * b[t * p + j]
                            cb[t * p + j] += gv * a[t]
            else:
                gv = go[0]
                for t in range(n):
                    ca[t] += gv * b[t]
                    cb[t] += gv * a[t]
        elif op == HAD:
            case = ins[k, 5]
            numel = ins[k, 6]
            if case == 0:
                for t in range(numel):
                    ca[t] += go[t] * b[t]
                    cb[t] += go[t] * a[t]
            elif case == 1:
                for t in range(numel):
                    ca[0] += go[t] * b[t]
                    cb[t] += go[t] * a[0]
            else:
                for t in range(numel):
                    ca[t] += go[t] * b[0]
                    cb[0] += go[t] * a[t]
        elif op == SCALE:
            numel = ins[k, 5]
            s = insf[k]
            for t in range(numel):
                ca[t] += go[t] * s
        elif op == TRANS:
            m = ins[k, 5]
            n = ins[k, 6]
            for i in range(m):
                for j in range(n):
                    ca[i * n + j] += go[j * m + i]
        elif op == SOFTPLUS:
            numel = ins[k, 5]
            for t in range(numel):
                ca[t] += _sigmoid(a[t]) * go[t]
        elif op == RELU:
            numel = ins[k, 5]
            for t in range(numel):
                if a[t] > 0.0:
                    ca[t] += go[t]
        elif op == SIGMOID:
            numel = ins[k, 5]
            b = w + soff[ins[k, 1]]  # forward output s
            for t in range(numel):
                s = b[t]
                ca[t] += s * (1.0 - s) * go[t]
        elif op == SUM:
            numel = ins[k, 5]
            gv = go[0]
            for t in range(numel):
                ca[t] += gv
        elif op == SQUARE:
            numel = ins[k, 5]
            for t in range(numel):
                ca[t] += 2.0 * a[t] * go[t]
        elif op == SELECT:
            numel = ins[k, 5]
            for t in range(numel):
                if a[t] > 0.0:
                    cb[t] += go[t]
                else:
                    cc[t] += go[t]
        elif op == COPYAT:
            numel = ins[k, 6]
            for t in range(numel):
                ca[t] += go[ins[k, 5] + t]
        elif op == RECIP:
            numel = ins[k, 5]
            b = w + soff[ins[k, 1]]  # forward output 1/a
            for t in range(numel):
                ca[t] += -(b[t] * b[t]) * go[t]


def run_program(const int[:, ::1] instrs, const double[::1] instr_f,
                const int[::1] slot_off,
                const double[::1] static_buf, int total_size,
                const int[::1] in_off, const int[::1] in_size,
                const double[:, ::1] in_data,
                const int[::1] out_off, const int[::1] out_size,
                double[:, ::1] out_data,
                int do_grad, int root_off,
                const int[::1] grad_off, const int[::1] grad_size,
                double[::1] grad_data):
    """Execute the tape for every sample (row) of ``in_data``.

    Instruction operand fields index slots; ``slot_off`` maps a slot to its
    element offset in the flat work buffer.  Outputs are written into
    ``out_data``; when ``do_grad`` is set the gradient of the scalar at
    ``root_off`` w.r.t. each gradient slot is accumulated (summed over
    samples) into ``grad_data``.
    """
    cdef Py_ssize_t B = in_data.shape[0]
    cdef Py_ssize_t n_ins = instrs.shape[0]
    cdef Py_ssize_t n_in = in_off.shape[0]
    cdef Py_ssize_t n_out = out_off.shape[0]
    cdef Py_ssize_t n_grad = grad_off.shape[0]

    work_arr = np.array(static_buf, dtype=np.float64, copy=True)
    cot_arr = np.zeros(total_size, dtype=np.float64)
    cdef double[::1] work = work_arr
    cdef double[::1] cot = cot_arr
    cdef double* w = &work[0]
    cdef double* ct = &cot[0]
    cdef const int[::1] soff = slot_off

    cdef Py_ssize_t bi, j, t, col, o
    with nogil:
        for bi in range(B):
            col = 0
            for j in range(n_in):
                memcpy(w + in_off[j], &in_data[bi, col],
                       in_size[j] * sizeof(double))
                col += in_size[j]
            _forward(instrs, instr_f, soff, w, n_ins)
            col = 0
            for j in range(n_out):
                memcpy(&out_data[bi, col], w + out_off[j],
                       out_size[j] * sizeof(double))
                col += out_size[j]
            if do_grad:
                memset(ct, 0, total_size * sizeof(double))
                ct[root_off] = 1.0
                _backward(instrs, instr_f, soff, w, ct, n_ins)
                col = 0
                for j in range(n_grad):
                    o = grad_off[j]
                    for t in range(grad_size[j]):
                        grad_data[col + t] += ct[o + t]
                    col += grad_size[j]
