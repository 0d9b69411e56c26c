# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: GAE, packed-sequence indexing, the packed GRU and single-step inference.

Semantics mirror ``_kernels_py`` exactly; see that module for descriptions.
Matrix products go through scipy's BLAS bindings on row-major buffers, so each
call is written as the transposed column-major product.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void _mm(int m, int n, int k, double* a, int lda, double* b, int ldb,
                     double* c, int ldc, double beta) noexcept nogil:
    # C[m,n] = A[m,k] @ B[k,n] + beta*C   (row-major)
    cdef char no = b'N'
    cdef double one = 1.0
    dgemm(&no, &no, &n, &m, &k, &one, b, &ldb, a, &lda, &beta, c, &ldc)


cdef inline void _mm_tn(int m, int n, int k, double* a, int lda, double* b, int ldb,
                        double* c, int ldc, double beta) noexcept nogil:
    # C[k,n] = A[m,k]^T @ B[m,n] + beta*C
    cdef char no = b'N'
    cdef char tr = b'T'
    cdef double one = 1.0
    dgemm(&no, &tr, &n, &k, &m, &one, b, &ldb, a, &lda, &beta, c, &ldc)


cdef inline void _mm_nt(int m, int n, int k, double* a, int lda, double* b, int ldb,
                        double* c, int ldc, double beta) noexcept nogil:
    # C[m,n] = A[m,k] @ B[n,k]^T + beta*C
    cdef char no = b'N'
    cdef char tr = b'T'
    cdef double one = 1.0
    dgemm(&tr, &no, &n, &m, &k, &one, b, &ldb, a, &lda, &beta, c, &ldc)


cdef inline double _tanh(double x) noexcept nogil:
    # exp-based: a few times cheaper than libm tanh, absolute error ~1e-16
    cdef double e
    if x > 20.0:
        return 1.0
    if x < -20.0:
        return -1.0
    e = exp(2.0 * x)
    return (e - 1.0) / (e + 1.0)


cdef inline double _sigmoid(double x) noexcept nogil:
    return 1.0 / (1.0 + exp(-x))


def gae(const double[::1] rewards, const double[::1] values, dones,
        const long[::1] offsets, const long[::1] lengths, const double[::1] bootstrap,
        double gamma, double lam):
    cdef Py_ssize_t steps = values.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=1, mode="c"] done_arr = np.ascontiguousarray(dones, dtype=np.uint8)
    cdef const unsigned char[::1] d = done_arr
    adv_arr = np.zeros(steps, dtype=np.float64)
    cdef double[::1] adv = adv_arr
    cdef Py_ssize_t k, i, start
    cdef double next_value, next_adv, nonterminal, delta
    with nogil:
        for k in range(offsets.shape[0]):
            start = offsets[k]
            next_value = bootstrap[k]
            next_adv = 0.0
            i = start + lengths[k] - 1
            while i >= start:
                nonterminal = 0.0 if d[i] else 1.0
                delta = rewards[i] + gamma * next_value * nonterminal - values[i]
                next_adv = delta + gamma * lam * nonterminal * next_adv
                adv[i] = next_adv
                next_value = values[i]
                i -= 1
    return adv_arr, adv_arr + np.asarray(values)


def pack_index(const long[::1] offsets, const long[::1] lengths):
    cdef Py_ssize_t k = lengths.shape[0]
    if k == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    cdef Py_ssize_t max_len = lengths[0]
    cdef Py_ssize_t total = 0, j, t, pos = 0, bs
    for j in range(k):
        total += lengths[j]
    bs_arr = np.empty(max_len, dtype=np.int64)
    flat_arr = np.empty(total, dtype=np.int64)
    cdef long[::1] batch_sizes = bs_arr
    cdef long[::1] flat = flat_arr
    with nogil:
        bs = k
        for t in range(max_len):
            while bs > 0 and lengths[bs - 1] <= t:
                bs -= 1
            batch_sizes[t] = bs
            for j in range(bs):
                flat[pos] = offsets[j] + t
                pos += 1
    return bs_arr, flat_arr


def gru_forward(const double[:, ::1] xproj, const double[:, ::1] w_hh, const double[::1] b_hh,
                const double[:, ::1] h0, const long[::1] batch_sizes):
    cdef int hidden = w_hh.shape[0]
    cdef int h3 = 3 * hidden
    cdef Py_ssize_t steps = xproj.shape[0]
    out_a = np.empty((steps, hidden))
    hprev_a = np.empty((steps, hidden))
    r_a = np.empty((steps, hidden))
    z_a = np.empty((steps, hidden))
    n_a = np.empty((steps, hidden))
    hn_a = np.empty((steps, hidden))
    gh_a = np.empty((h0.shape[0] if h0.shape[0] > 0 else 1, h3))
    cdef double[:, ::1] out = out_a
    cdef double[:, ::1] hprev = hprev_a
    cdef double[:, ::1] r = r_a
    cdef double[:, ::1] z = z_a
    cdef double[:, ::1] n = n_a
    cdef double[:, ::1] hn = hn_a
    cdef double[:, ::1] gh = gh_a
    cdef Py_ssize_t t, j, c, pos = 0, prev = 0, row
    cdef int bs
    cdef double rv, zv, nv, hv
    if steps == 0:
        return out_a, hprev_a, r_a, z_a, n_a, hn_a
    with nogil:
        for t in range(batch_sizes.shape[0]):
            bs = <int>batch_sizes[t]
            for j in range(bs):
                for c in range(hidden):
                    hprev[pos + j, c] = h0[j, c] if t == 0 else out[prev + j, c]
                for c in range(h3):
                    gh[j, c] = b_hh[c]
            _mm(bs, h3, hidden, &hprev[pos, 0], hidden, <double*>&w_hh[0, 0], h3,
                &gh[0, 0], h3, 1.0)
            for j in range(bs):
                row = pos + j
                for c in range(hidden):
                    rv = _sigmoid(xproj[row, c] + gh[j, c])
                    zv = _sigmoid(xproj[row, hidden + c] + gh[j, hidden + c])
                    hv = gh[j, 2 * hidden + c]
                    nv = _tanh(xproj[row, 2 * hidden + c] + rv * hv)
                    r[row, c] = rv
                    z[row, c] = zv
                    n[row, c] = nv
                    hn[row, c] = hv
                    out[row, c] = (1.0 - zv) * nv + zv * hprev[row, c]
            prev = pos
            pos += bs
    return out_a, hprev_a, r_a, z_a, n_a, hn_a


def gru_backward(const double[:, ::1] dout, const double[:, ::1] w_hh, const long[::1] batch_sizes,
                 const double[:, ::1] hprev, const double[:, ::1] r, const double[:, ::1] z,
                 const double[:, ::1] n, const double[:, ::1] hn, Py_ssize_t num_seqs):
    cdef int hidden = w_hh.shape[0]
    cdef int h3 = 3 * hidden
    cdef Py_ssize_t steps = dout.shape[0]
    cdef Py_ssize_t nt = batch_sizes.shape[0]
    cdef Py_ssize_t rows_max = num_seqs if num_seqs > 0 else 1
    dx_a = np.empty((steps, h3))
    dw_a = np.zeros((hidden, h3))
    db_a = np.zeros(h3)
    carry_a = np.zeros((num_seqs, hidden))
    dh_a = np.empty((rows_max, hidden))
    dg_a = np.empty((rows_max, h3))
    cdef double[:, ::1] dx = dx_a
    cdef double[:, ::1] dw = dw_a
    cdef double[::1] db = db_a
    cdef double[:, ::1] carry = carry_a
    cdef double[:, ::1] dh = dh_a
    cdef double[:, ::1] dg = dg_a
    starts_a = np.zeros(nt if nt > 0 else 1, dtype=np.int64)
    cdef long[::1] starts = starts_a
    cdef Py_ssize_t t, j, c, row, start
    cdef int bs
    cdef double g, zv, nv, rv, dn_pre, dz_pre, dr_pre
    for t in range(1, nt):
        starts[t] = starts[t - 1] + batch_sizes[t - 1]
    with nogil:
        t = nt - 1
        while t >= 0:
            bs = <int>batch_sizes[t]
            start = starts[t]
            for j in range(bs):
                row = start + j
                for c in range(hidden):
                    g = dout[row, c] + carry[j, c]
                    zv = z[row, c]
                    nv = n[row, c]
                    rv = r[row, c]
                    dn_pre = g * (1.0 - zv) * (1.0 - nv * nv)
                    dz_pre = g * (hprev[row, c] - nv) * zv * (1.0 - zv)
                    dr_pre = dn_pre * hn[row, c] * rv * (1.0 - rv)
                    dx[row, c] = dr_pre
                    dx[row, hidden + c] = dz_pre
                    dx[row, 2 * hidden + c] = dn_pre
                    dg[j, c] = dr_pre
                    dg[j, hidden + c] = dz_pre
                    dg[j, 2 * hidden + c] = dn_pre * rv
                    dh[j, c] = g * zv
                    db[c] += dr_pre
                    db[hidden + c] += dz_pre
                    db[2 * hidden + c] += dn_pre * rv
            _mm_tn(bs, h3, hidden, <double*>&hprev[start, 0], hidden, &dg[0, 0], h3,
                   &dw[0, 0], h3, 1.0)
            _mm_nt(bs, hidden, h3, &dg[0, 0], h3, <double*>&w_hh[0, 0], h3,
                   &dh[0, 0], hidden, 1.0)
            for j in range(bs):
                for c in range(hidden):
                    carry[j, c] = dh[j, c]
            t -= 1
    return dx_a, dw_a, db_a, carry_a


cdef void _step_rows(int nb, int d, int e, int hs, int a, double* obs, double* h,
                     double* w1, double* b1, double* w2, double* b2, double* wi, double* bi,
                     double* wh, double* bh, double* pw, double* pb, double* vw, double* vb,
                     double* x1, double* x2, double* gi, double* gh, double* hn,
                     double* head, double* val) noexcept nogil:
    # all buffers row-major and contiguous; gate order r, z, n
    cdef int h3 = 3 * hs
    cdef Py_ssize_t j, c
    cdef double rv, zv, nv
    for j in range(nb):
        for c in range(e):
            x1[j * e + c] = b1[c]
            x2[j * e + c] = b2[c]
        for c in range(h3):
            gi[j * h3 + c] = bi[c]
            gh[j * h3 + c] = bh[c]
        for c in range(a):
            head[j * a + c] = pb[c]
        val[j] = vb[0]
    _mm(nb, e, d, obs, d, w1, e, x1, e, 1.0)
    for j in range(nb * e):
        x1[j] = _tanh(x1[j])
    _mm(nb, e, e, x1, e, w2, e, x2, e, 1.0)
    for j in range(nb * e):
        x2[j] = _tanh(x2[j])
    _mm(nb, h3, e, x2, e, wi, h3, gi, h3, 1.0)
    _mm(nb, h3, hs, h, hs, wh, h3, gh, h3, 1.0)
    for j in range(nb):
        for c in range(hs):
            rv = _sigmoid(gi[j * h3 + c] + gh[j * h3 + c])
            zv = _sigmoid(gi[j * h3 + hs + c] + gh[j * h3 + hs + c])
            nv = _tanh(gi[j * h3 + 2 * hs + c] + rv * gh[j * h3 + 2 * hs + c])
            hn[j * hs + c] = (1.0 - zv) * nv + zv * h[j * hs + c]
    _mm(nb, a, hs, hn, hs, pw, a, head, a, 1.0)
    _mm(nb, 1, hs, hn, hs, vw, 1, val, 1, 1.0)


cdef void _categorical_rows(int nb, int na, double* logits, double* u, long* act,
                            double* logp) noexcept nogil:
    cdef Py_ssize_t j, c, k
    cdef double m, s, lse, cdf
    cdef double* row
    for j in range(nb):
        row = logits + j * na
        m = row[0]
        for c in range(1, na):
            if row[c] > m:
                m = row[c]
        s = 0.0
        for c in range(na):
            s = s + exp(row[c] - m)
        lse = log(s)
        k = 0
        cdf = 0.0
        for c in range(na):
            cdf = cdf + exp((row[c] - m) - lse)
            if cdf < u[j]:
                k += 1
        if k > na - 1:
            k = na - 1
        act[j] = k
        logp[j] = (row[k] - m) - lse


def policy_step(const double[:, ::1] obs, const double[:, ::1] h,
                const double[:, ::1] w1, const double[::1] b1,
                const double[:, ::1] w2, const double[::1] b2,
                const double[:, ::1] wi, const double[::1] bi,
                const double[:, ::1] wh, const double[::1] bh,
                const double[:, ::1] pw, const double[::1] pb,
                const double[:, ::1] vw, const double[::1] vb):
    cdef int nb = obs.shape[0]
    cdef int d = obs.shape[1]
    cdef int e = w1.shape[1]
    cdef int hs = wh.shape[0]
    cdef int a = pw.shape[1]
    head_a = np.empty((nb, a))
    val_a = np.empty(nb)
    hn_a = np.empty((nb, hs))
    if nb == 0:
        return head_a, val_a, hn_a
    cdef double[::1] scratch = np.empty(nb * (2 * e + 6 * hs))
    cdef double[:, ::1] head = head_a
    cdef double[::1] val = val_a
    cdef double[:, ::1] hn = hn_a
    cdef double* base = &scratch[0]
    with nogil:
        _step_rows(nb, d, e, hs, a, <double*>&obs[0, 0], <double*>&h[0, 0],
                   <double*>&w1[0, 0], <double*>&b1[0], <double*>&w2[0, 0], <double*>&b2[0],
                   <double*>&wi[0, 0], <double*>&bi[0], <double*>&wh[0, 0], <double*>&bh[0],
                   <double*>&pw[0, 0], <double*>&pb[0], <double*>&vw[0, 0], <double*>&vb[0],
                   base, base + nb * e, base + 2 * nb * e, base + nb * (2 * e + 3 * hs),
                   &hn[0, 0], &head[0, 0], &val[0])
    return head_a, val_a, hn_a


cdef class StepKernel:
    """Reusable single-step inference with preallocated scratch; see ``_kernels_py.StepKernel``."""

    cdef int max_batch, d, e, hs, a
    cdef object _params
    cdef double[:, ::1] w1, w2, wi, wh, pw, vw
    cdef double[::1] b1, b2, bi, bh, pb, vb
    cdef double[:, ::1] xin, hin, x1, x2, gi, gh, _head, _hidden
    cdef double[::1] _values, _logp
    cdef long[::1] _act
    cdef public object head, values, hidden, actions, log_probs

    def __init__(self, int max_batch, int obs_dim, int enc, int hidden, int head):
        self.max_batch = max_batch
        self.d = obs_dim
        self.e = enc
        self.hs = hidden
        self.a = head
        self.xin = np.zeros((max_batch, obs_dim))
        self.hin = np.zeros((max_batch, hidden))
        self.x1 = np.zeros((max_batch, enc))
        self.x2 = np.zeros((max_batch, enc))
        self.gi = np.zeros((max_batch, 3 * hidden))
        self.gh = np.zeros((max_batch, 3 * hidden))
        self.head = np.zeros((max_batch, head))
        self.values = np.zeros(max_batch)
        self.hidden = np.zeros((max_batch, hidden))
        self.actions = np.zeros(max_batch, dtype=np.int64)
        self.log_probs = np.zeros(max_batch)
        self._head = self.head
        self._values = self.values
        self._hidden = self.hidden
        self._act = self.actions
        self._logp = self.log_probs
        self._params = None

    def load(self, *params):
        if len(params) != 12:
            raise ValueError("expected 12 parameter arrays")
        w1, b1, w2, b2, wi, bi, wh, bh, pw, pb, vw, vb = [np.ascontiguousarray(p, dtype=np.float64)
                                                          for p in params]
        if (w1.shape[0] != self.d or w1.shape[1] != self.e or wh.shape[0] != self.hs
                or pw.shape[1] != self.a):
            raise ValueError("parameter shapes do not match the kernel dimensions")
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2
        self.wi, self.bi, self.wh, self.bh = wi, bi, wh, bh
        self.pw, self.pb, self.vw, self.vb = pw, pb, vw, vb
        self._params = (w1, b1, w2, b2, wi, bi, wh, bh, pw, pb, vw, vb)

    def run(self, batch, const double[:, ::1] obs, const double[:, ::1] h):
        if self._params is None:
            raise RuntimeError("load() parameters first")
        cdef int nb = len(batch)
        cdef Py_ssize_t j, c, row
        if nb > self.max_batch:
            raise ValueError(f"batch of {nb} exceeds max_batch {self.max_batch}")
        if nb == 0:
            return 0
        for j in range(nb):
            row = batch[j]
            if row < 0 or row >= obs.shape[0]:
                raise IndexError(f"row {row} out of range")
            for c in range(self.d):
                self.xin[j, c] = obs[row, c]
            for c in range(self.hs):
                self.hin[j, c] = h[row, c]
        with nogil:
            _step_rows(nb, self.d, self.e, self.hs, self.a, &self.xin[0, 0], &self.hin[0, 0],
                       &self.w1[0, 0], &self.b1[0], &self.w2[0, 0], &self.b2[0],
                       &self.wi[0, 0], &self.bi[0], &self.wh[0, 0], &self.bh[0],
                       &self.pw[0, 0], &self.pb[0], &self.vw[0, 0], &self.vb[0],
                       &self.x1[0, 0], &self.x2[0, 0], &self.gi[0, 0], &self.gh[0, 0],
                       &self._hidden[0, 0], &self._head[0, 0], &self._values[0])
        return nb

    def sample(self, int nb, const double[::1] u):
        if nb > self.max_batch or u.shape[0] < nb:
            raise ValueError("sample() batch does not fit")
        if nb == 0:
            return
        with nogil:
            _categorical_rows(nb, self.a, &self._head[0, 0], <double*>&u[0], &self._act[0],
                              &self._logp[0])


def categorical_sample(const double[:, ::1] logits, const double[::1] u):
    cdef int nb = logits.shape[0]
    act_a = np.empty(nb, dtype=np.int64)
    logp_a = np.empty(nb)
    cdef long[::1] act = act_a
    cdef double[::1] logp = logp_a
    if nb == 0:
        return act_a, logp_a
    with nogil:
        _categorical_rows(nb, logits.shape[1], <double*>&logits[0, 0], <double*>&u[0], &act[0], &logp[0])
    return act_a, logp_a
