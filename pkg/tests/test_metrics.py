import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flashback import metrics as mt
from flashback.metrics import AccuracyMatrix, MatrixFormatError


@pytest.fixture
def toy():
    # A[1][1]=0.9, A[2][1]=0.7, A[2][2]=0.8
    return AccuracyMatrix.from_rows([[0.9], [0.7, 0.8]])


def random_matrix(T, seed):
    rng = np.random.default_rng(seed)
    return AccuracyMatrix.from_rows([list(rng.uniform(size=t)) for t in range(1, T + 1)])


def brute_aia(A):
    total = 0.0
    for t in range(1, A.T + 1):
        s = 0.0
        for j in range(1, t + 1):
            s += A[(t, j)]
        total += s / t
    return total / A.T


def brute_forgetting(A):
    total = 0.0
    for t in range(1, A.T):
        best = -1.0
        for k in range(t, A.T + 1):
            best = max(best, A[(k, t)])
        total += best - A[(A.T, t)]
    return total / (A.T - 1)


matrices = st.integers(1, 6).flatmap(
    lambda T: st.lists(st.floats(0, 1), min_size=T * (T + 1) // 2, max_size=T * (T + 1) // 2).map(
        lambda v, T=T: AccuracyMatrix.from_rows([v[t * (t - 1) // 2: t * (t + 1) // 2] for t in range(1, T + 1)])
    )
)


class TestMatrix:
    def test_rejects_out_of_range(self):
        A = AccuracyMatrix(2)
        with pytest.raises(ValueError):
            A.set(1, 1, 1.5)
        with pytest.raises(IndexError):
            A.set(1, 2, 0.5)
        with pytest.raises(ValueError):
            AccuracyMatrix(0)

    def test_missing_cell(self):
        A = AccuracyMatrix(2)
        A.set(2, 2, 0.5)
        with pytest.raises(KeyError):
            mt.average_accuracy(A)
        assert not A.is_complete()


class TestToy:
    def test_values(self, toy):
        assert mt.average_accuracy(toy) == pytest.approx(0.75)
        assert mt.average_incremental_accuracy(toy) == pytest.approx(0.825, abs=1e-15)
        assert mt.forgetting(toy) == pytest.approx(0.2, abs=1e-15)
        assert mt.backward_transfer(toy) == pytest.approx(-0.2, abs=1e-15)

    def test_aa_example(self):
        A = AccuracyMatrix.from_rows([[0.9], [0.5, 0.7]])
        assert mt.average_accuracy(A) == pytest.approx(0.6, abs=1e-15)

    def test_spr(self):
        assert mt.spr(0.2, 0.8) == pytest.approx(25.0, abs=1e-12)
        assert mt.spr(0.0, 0.5) == 0.0
        assert mt.spr(0.2, 0.0) is None
        assert mt.spr(None, 0.5) is None

    def test_single_task(self):
        A = AccuracyMatrix.from_rows([[0.6]])
        assert mt.average_accuracy(A) == 0.6
        assert mt.forgetting(A) is None and mt.backward_transfer(A) is None
        rep = mt.report(A)
        assert rep.F is None and rep.SPR is None and rep.FWT is None

    def test_constant_matrix(self):
        A = AccuracyMatrix.from_rows([[0.4] * t for t in range(1, 5)])
        assert mt.average_incremental_accuracy(A) == pytest.approx(0.4)
        assert mt.forgetting(A) == 0.0 and mt.backward_transfer(A) == 0.0

    def test_non_decreasing_means_no_forgetting(self):
        A = AccuracyMatrix.from_rows([[0.5], [0.6, 0.5], [0.7, 0.6, 0.5]])
        assert mt.forgetting(A) == 0.0

    def test_fwt_chance_level(self):
        A = AccuracyMatrix.from_rows([[0.9], [0.8, 0.9]])
        A.pre[2] = 0.5
        assert mt.forward_transfer(A, {2: 0.5}) == 0.0
        assert mt.forward_transfer(A) is None


class TestAgainstOracles:
    @pytest.mark.parametrize("seed", range(5))
    def test_random_matrices(self, seed):
        A = random_matrix(4, seed)
        assert mt.average_accuracy(A) == pytest.approx(np.mean([A[(4, j)] for j in range(1, 5)]), abs=1e-15)
        assert mt.average_incremental_accuracy(A) == pytest.approx(brute_aia(A), abs=1e-15)
        assert mt.forgetting(A) == pytest.approx(brute_forgetting(A), abs=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(A=matrices)
    def test_ranges(self, A):
        assert 0.0 <= mt.average_accuracy(A) <= 1.0
        assert 0.0 <= mt.average_incremental_accuracy(A) <= 1.0
        F = mt.forgetting(A)
        assert F is None or 0.0 <= F <= 1.0

    @settings(max_examples=40, deadline=None)
    @given(A=matrices, seed=st.integers(0, 1000))
    def test_aa_symmetric_under_relabelling(self, A, seed):
        last = A.row(A.T)
        perm = np.random.default_rng(seed).permutation(A.T)
        B = AccuracyMatrix.from_rows([[0.0] * t for t in range(1, A.T)] + [[last[i] for i in perm]])
        assert mt.average_accuracy(B) == pytest.approx(mt.average_accuracy(A), abs=1e-15)


class TestCKA:
    def test_identity(self, rng):
        X = rng.normal(size=(20, 5))
        assert mt.linear_cka(X, X) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_invariance(self, rng):
        X = rng.normal(size=(30, 6))
        Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        assert abs(mt.linear_cka(X, X @ Q) - 1.0) <= 1e-10

    @pytest.mark.parametrize("c", [-3.0, 0.01, 7.5])
    def test_scale_invariance(self, rng, c):
        X, Y = rng.normal(size=(25, 4)), rng.normal(size=(25, 3))
        assert abs(mt.linear_cka(X, c * Y) - mt.linear_cka(X, Y)) <= 1e-10
        assert abs(mt.linear_cka(X, c * X) - 1.0) <= 1e-10

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), n=st.integers(3, 30), d1=st.integers(1, 6), d2=st.integers(1, 6))
    def test_symmetric_and_bounded(self, seed, n, d1, d2):
        rng = np.random.default_rng(seed)
        X, Y = rng.normal(size=(n, d1)), rng.normal(size=(n, d2))
        a, b = mt.linear_cka(X, Y), mt.linear_cka(Y, X)
        assert abs(a - b) <= 1e-12
        assert -1e-12 <= a <= 1.0 + 1e-12

    def test_matches_kernel_form(self, rng):
        # HSIC normalised with centred Gram matrices
        X, Y = rng.normal(size=(15, 4)), rng.normal(size=(15, 3))
        H = np.eye(15) - 1.0 / 15
        K, L = H @ X @ X.T @ H, H @ Y @ Y.T @ H
        ref = np.sum(K * L) / math.sqrt(np.sum(K * K) * np.sum(L * L))
        assert mt.linear_cka(X, Y) == pytest.approx(ref, abs=1e-12)

    def test_errors(self, rng):
        assert mt.linear_cka(np.ones((5, 2)), rng.normal(size=(5, 2))) is None
        with pytest.raises(ValueError):
            mt.linear_cka(rng.normal(size=(5, 2)), rng.normal(size=(4, 2)))
        with pytest.raises(ValueError):
            mt.linear_cka(rng.normal(size=(1, 2)), rng.normal(size=(1, 2)))


class TestTTest:
    def test_hand_example(self):
        res = mt.paired_t_test([1, 2, 3], [0, 2, 2])
        assert res.t == pytest.approx(2.0, abs=1e-12)
        # df = 2 has a closed-form CDF: p = 1 - t / sqrt(t^2 + 2)
        assert res.p == pytest.approx(1 - 2 / math.sqrt(6), abs=1e-12)
        assert res.p == pytest.approx(0.1835, abs=1e-4)

    def test_degenerate(self):
        res = mt.paired_t_test([1, 2, 3], [1, 2, 3])
        assert res.degenerate and res.t is None and res.p is None

    def test_input_errors(self):
        with pytest.raises(ValueError):
            mt.paired_t_test([1], [2])
        with pytest.raises(ValueError):
            mt.paired_t_test([1, 2], [1, 2, 3])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=2, max_size=20))
    def test_sign_flip(self, pairs):
        a, b = zip(*pairs)
        fwd, back = mt.paired_t_test(a, b), mt.paired_t_test(b, a)
        if fwd.degenerate:
            assert back.degenerate
        else:
            assert back.t == pytest.approx(-fwd.t, rel=1e-12)
            assert back.p == pytest.approx(fwd.p, rel=1e-12)


class TestMatrixCSV:
    def test_roundtrip(self, tmp_path, toy):
        toy.pre[2] = 0.45
        toy.baseline.update({1: 0.5, 2: 0.5})
        other = AccuracyMatrix.from_rows([[0.95], [0.85, 0.9]])
        path = tmp_path / "m.csv"
        mt.write_matrix_csv(path, {"CI": toy, "TI": other})
        back = mt.read_matrix_csv(path)
        assert back["CI"].entries == toy.entries
        assert back["CI"].pre == toy.pre and back["CI"].baseline == toy.baseline
        assert back["TI"].entries == other.entries
        assert mt.matrix_csv_text(back) == path.read_text()

    @pytest.mark.parametrize(
        "body",
        [
            "",
            "X,2\n",
            "T,two\n",
            "T,0\n",
            "T,2\nt,j,acc\n",
            "T,1\nt,j,acc,regime\n",
            "T,1\nt,j,acc,regime\n1,1,0.5\n",
            "T,1\nt,j,acc,regime\n1,1,abc,CI\n",
            "T,1\nt,j,acc,regime\n1,1,0.5,XX\n",
            "T,1\nt,j,acc,regime\n1,1,1.5,CI\n",
            "T,2\nt,j,acc,regime\n1,1,0.5,CI\n",
            "T,2\nt,j,acc,regime\n3,1,0.5,CI\n",
        ],
    )
    def test_malformed(self, tmp_path, body):
        path = tmp_path / "bad.csv"
        path.write_text(body)
        with pytest.raises(MatrixFormatError):
            mt.read_matrix_csv(path)

    def test_values_format(self):
        assert mt.format_value(None) == "n/a"
        assert mt.parse_value(mt.format_value(0.1 + 0.2)) == 0.1 + 0.2
        assert mt.parse_value(" n/a ") is None
