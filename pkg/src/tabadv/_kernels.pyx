# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled tree kernels. Mirrors ``_kernels_py`` function for function."""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()


def ensemble_sum(const cnp.int64_t[:] left, const cnp.int64_t[:] right,
                 const cnp.int64_t[:] feature, const double[:] threshold,
                 const double[:] value, const cnp.int64_t[:] roots, X):
    cdef const double[:, :] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], n_trees = roots.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(n, dtype=np.float64)
    cdef double[:] o = out
    cdef Py_ssize_t i, t
    cdef cnp.int64_t node
    cdef double acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for t in range(n_trees):
                node = roots[t]
                while left[node] >= 0:
                    if Xv[i, feature[node]] <= threshold[node]:
                        node = left[node]
                    else:
                        node = right[node]
                acc += value[node]
            o[i] = acc
    return out


def ensemble_apply(const cnp.int64_t[:] left, const cnp.int64_t[:] right,
                   const cnp.int64_t[:] feature, const double[:] threshold,
                   const cnp.int64_t[:] roots, X):
    cdef const double[:, :] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], n_trees = roots.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=2] out = np.empty((n, n_trees), dtype=np.int64)
    cdef cnp.int64_t[:, :] o = out
    cdef Py_ssize_t i, t
    cdef cnp.int64_t node
    with nogil:
        for i in range(n):
            for t in range(n_trees):
                node = roots[t]
                while left[node] >= 0:
                    if Xv[i, feature[node]] <= threshold[node]:
                        node = left[node]
                    else:
                        node = right[node]
                o[i, t] = node
    return out


cdef struct PathElement:
    cnp.int64_t feature
    double zero
    double one
    double pweight


cdef inline void _extend(PathElement* path, Py_ssize_t depth, double zero_fraction,
                         double one_fraction, cnp.int64_t feature_index) noexcept nogil:
    cdef Py_ssize_t i
    path[depth].feature = feature_index
    path[depth].zero = zero_fraction
    path[depth].one = one_fraction
    path[depth].pweight = 1.0 if depth == 0 else 0.0
    i = depth - 1
    while i >= 0:
        path[i + 1].pweight += one_fraction * path[i].pweight * (i + 1) / <double>(depth + 1)
        path[i].pweight = zero_fraction * path[i].pweight * (depth - i) / <double>(depth + 1)
        i -= 1


cdef inline void _unwind(PathElement* path, Py_ssize_t depth, Py_ssize_t path_index) noexcept nogil:
    cdef double one_fraction = path[path_index].one
    cdef double zero_fraction = path[path_index].zero
    cdef double next_one = path[depth].pweight
    cdef double tmp
    cdef Py_ssize_t i = depth - 1
    while i >= 0:
        if one_fraction != 0.0:
            tmp = path[i].pweight
            path[i].pweight = next_one * (depth + 1) / ((i + 1) * one_fraction)
            next_one = tmp - path[i].pweight * zero_fraction * (depth - i) / <double>(depth + 1)
        else:
            path[i].pweight = path[i].pweight * (depth + 1) / (zero_fraction * (depth - i))
        i -= 1
    for i in range(path_index, depth):
        path[i].feature = path[i + 1].feature
        path[i].zero = path[i + 1].zero
        path[i].one = path[i + 1].one


cdef inline double _unwound_sum(PathElement* path, Py_ssize_t depth, Py_ssize_t path_index) noexcept nogil:
    cdef double one_fraction = path[path_index].one
    cdef double zero_fraction = path[path_index].zero
    cdef double next_one = path[depth].pweight
    cdef double total = 0.0
    cdef double tmp
    cdef Py_ssize_t i = depth - 1
    if one_fraction != 0.0:
        while i >= 0:
            tmp = next_one / ((i + 1) * one_fraction)
            total += tmp
            next_one = path[i].pweight - tmp * zero_fraction * (depth - i)
            i -= 1
    else:
        while i >= 0:
            total += path[i].pweight / (zero_fraction * (depth - i))
            i -= 1
    return total * (depth + 1)


cdef void _recurse(const cnp.int64_t[:] left, const cnp.int64_t[:] right,
                   const cnp.int64_t[:] feature, const double[:] threshold,
                   const double[:] value, const double[:] weight,
                   const double[:] x, double[:] phi, cnp.int64_t node,
                   Py_ssize_t depth, PathElement* parent, double pz, double po,
                   cnp.int64_t pfeat) noexcept nogil:
    cdef PathElement* path = parent + depth + 1
    cdef Py_ssize_t i
    cdef double w
    cdef cnp.int64_t split, hot, cold
    cdef double hot_zero, cold_zero, incoming_zero = 1.0, incoming_one = 1.0

    for i in range(depth + 1):
        path[i] = parent[i]
    _extend(path, depth, pz, po, pfeat)

    if left[node] < 0:
        for i in range(1, depth + 1):
            w = _unwound_sum(path, depth, i)
            phi[path[i].feature] += w * (path[i].one - path[i].zero) * value[node]
        return

    split = feature[node]
    if x[split] <= threshold[node]:
        hot = left[node]
        cold = right[node]
    else:
        hot = right[node]
        cold = left[node]
    hot_zero = weight[hot] / weight[node]
    cold_zero = weight[cold] / weight[node]

    for i in range(1, depth + 1):
        if path[i].feature == split:
            incoming_zero = path[i].zero
            incoming_one = path[i].one
            _unwind(path, depth, i)
            depth -= 1
            break

    _recurse(left, right, feature, threshold, value, weight, x, phi, hot,
             depth + 1, path, hot_zero * incoming_zero, incoming_one, split)
    _recurse(left, right, feature, threshold, value, weight, x, phi, cold,
             depth + 1, path, cold_zero * incoming_zero, 0.0, split)


def ensemble_shap(const cnp.int64_t[:] left, const cnp.int64_t[:] right,
                  const cnp.int64_t[:] feature, const double[:] threshold,
                  const double[:] value, const double[:] weight,
                  const cnp.int64_t[:] roots, Py_ssize_t max_depth, X,
                  Py_ssize_t n_features):
    cdef const double[:, :] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], n_trees = roots.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, n_features), dtype=np.float64)
    cdef double[:, :] o = out
    cdef Py_ssize_t size = (max_depth + 2) * (max_depth + 3)
    cdef PathElement* buf = <PathElement*> malloc(size * sizeof(PathElement))
    cdef Py_ssize_t r, t
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for r in range(n):
                for t in range(n_trees):
                    _recurse(left, right, feature, threshold, value, weight,
                             Xv[r], o[r], roots[t], 0, buf, 1.0, 1.0, -1)
    finally:
        free(buf)
    return out
