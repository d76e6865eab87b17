import numpy as np
import pytest

from malrobust.data import (Dataset, ManipulationPolicy, admissible, binarize,
                            generate_synthetic, oversample, project_to_m,
                            read_policy, read_sparse, split, write_policy,
                            write_sparse)


class TestBinarize:
    def test_definition(self):
        out = binarize(np.array([0.2, 0.7]), np.array([0.5, 0.5]))
        assert np.array_equal(out, [0.0, 1.0])

    def test_binary_input_unchanged(self):
        x = np.array([0.0, 1.0, 1.0, 0.0])
        assert np.array_equal(binarize(x, 0.5), x)

    def test_tie_maps_up(self):
        assert binarize(np.array([0.5]), np.array([0.5]))[0] == 1.0

    def test_idempotent(self, rng):
        x = rng.random(50)
        theta = np.full(50, 0.5)
        once = binarize(x, theta)
        assert np.array_equal(binarize(once, theta), once)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            binarize(np.zeros(3), np.zeros(4))


def random_policy(rng, dim):
    return ManipulationPolicy(rng.random(dim) < 0.6, rng.random(dim) < 0.6)


class TestAdmissible:
    def test_identity_always_admissible(self, rng):
        x = (rng.random(10) < 0.5).astype(float)
        pol = ManipulationPolicy(np.zeros(10, bool), np.zeros(10, bool))
        assert admissible(x, x.copy(), pol)

    def test_forbidden_removal(self):
        pol = ManipulationPolicy(np.array([True]), np.array([False]))
        assert not admissible(np.array([1.0]), np.array([0.0]), pol)

    def test_matches_coordinate_oracle(self, rng):
        for _ in range(300):
            dim = 12
            x = (rng.random(dim) < 0.5).astype(float)
            x_adv = (rng.random(dim) < 0.5).astype(float)
            pol = random_policy(rng, dim)
            expected = True
            for j in range(dim):
                if x[j] == 0 and x_adv[j] == 1 and not pol.addition_allowed[j]:
                    expected = False
                if x[j] == 1 and x_adv[j] == 0 and not pol.removal_allowed[j]:
                    expected = False
            assert admissible(x, x_adv, pol) == expected

    def test_non_binary_rejected(self):
        pol = ManipulationPolicy(np.ones(2, bool), np.ones(2, bool))
        with pytest.raises(ValueError):
            admissible(np.array([0.5, 0.0]), np.array([0.0, 0.0]), pol)


class TestProjectToM:
    def test_rounding_forced(self):
        pol = ManipulationPolicy(np.ones(3, bool), np.ones(3, bool))
        out = project_to_m(np.array([0.0, 0.0, 1.0]), np.array([0.7, 0.2, 0.9]), pol)
        assert np.array_equal(out, [1.0, 0.0, 1.0])

    def test_forbidden_flip_reverted(self):
        pol = ManipulationPolicy(np.ones(2, bool), np.array([True, False]))
        out = project_to_m(np.array([0.0, 1.0]), np.array([0.9, 0.1]), pol)
        assert np.array_equal(out, [1.0, 1.0])

    def test_output_always_admissible(self, rng):
        for _ in range(500):
            dim = 15
            x = (rng.random(dim) < 0.5).astype(float)
            x_cont = rng.random(dim)
            pol = random_policy(rng, dim)
            out = project_to_m(x, x_cont, pol)
            assert admissible(x, out, pol)


def toy_dataset(counts, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    X, y = [], []
    for c, n in enumerate(counts):
        X.append((rng.random((n, dim)) < 0.5).astype(float))
        y.append(np.full(n, c))
    return Dataset(np.vstack(X), np.concatenate(y), len(counts))


class TestOversample:
    def test_already_balanced_unchanged(self):
        ds = toy_dataset([9, 9])
        out = oversample(ds, 1.0, seed=1)
        assert len(out) == 18
        assert np.array_equal(out.X, ds.X)

    def test_minority_grows_to_floor(self):
        ds = toy_dataset([100, 10])
        out = oversample(ds, 0.30, seed=2)
        counts = np.bincount(out.y)
        assert counts[0] == 100
        assert counts[1] >= 30

    def test_floor_already_met(self):
        ds = toy_dataset([20, 15])
        out = oversample(ds, 0.5, seed=3)
        assert len(out) == 35

    def test_replicas_are_source_copies_and_originals_kept(self):
        ds = toy_dataset([40, 5], dim=6, seed=7)
        out = oversample(ds, 0.5, seed=8)
        assert np.array_equal(out.X[:len(ds)], ds.X)
        source = {tuple(row) for row in ds.X[ds.y == 1]}
        for row, label in zip(out.X[len(ds):], out.y[len(ds):]):
            assert label == 1
            assert tuple(row) in source

    def test_empty_class_rejected(self):
        ds = Dataset(np.zeros((3, 2)), np.array([0, 0, 0]), 2)
        with pytest.raises(ValueError):
            oversample(ds, 0.5)


class TestSplit:
    def test_ten_examples_six_two_two(self):
        ds = toy_dataset([5, 5])
        tr, va, te = split(ds, (0.6, 0.2, 0.2), seed=4)
        assert (len(tr), len(va), len(te)) == (6, 2, 2)

    def test_deterministic(self):
        ds = toy_dataset([30, 20])
        a = split(ds, (0.6, 0.2, 0.2), seed=9)
        b = split(ds, (0.6, 0.2, 0.2), seed=9)
        for p1, p2 in zip(a, b):
            assert np.array_equal(p1.X, p2.X)
            assert np.array_equal(p1.y, p2.y)

    def test_disjoint_and_exhaustive(self):
        ds = toy_dataset([17, 23, 11], dim=8, seed=5)
        parts = split(ds, (0.6, 0.2, 0.2), seed=6)
        rows = [tuple(r) + (l,) for p in parts for r, l in zip(p.X, p.y)]
        assert len(rows) == len(ds)
        all_rows = sorted(tuple(r) + (l,) for r, l in zip(ds.X, ds.y))
        assert sorted(rows) == all_rows

    def test_stratified_within_one(self):
        ds = toy_dataset([40, 25, 13], seed=10)
        parts = split(ds, (0.6, 0.2, 0.2), seed=11)
        for c, n_c in enumerate([40, 25, 13]):
            for frac, part in zip((0.6, 0.2, 0.2), parts):
                got = int(np.sum(part.y == c))
                assert abs(got - n_c * frac) < 1.0

    def test_bad_fractions(self):
        ds = toy_dataset([4, 4])
        with pytest.raises(ValueError):
            split(ds, (0.5, 0.2, 0.2))


class TestGenerateSynthetic:
    def test_zero_noise_gives_prototypes(self):
        ds, _ = generate_synthetic(20, 2, 5, flip_noise=0.0, seed=1)
        for c in range(2):
            Xc = ds.X[ds.y == c]
            assert np.all(Xc == Xc[0])

    def test_deterministic(self):
        a, pa = generate_synthetic(30, 3, 10, 0.1, seed=2)
        b, pb = generate_synthetic(30, 3, 10, 0.1, seed=2)
        assert np.array_equal(a.X, b.X)
        assert np.array_equal(pa.addition_allowed, pb.addition_allowed)
        assert np.array_equal(pa.removal_allowed, pb.removal_allowed)

    def test_policy_fractions(self):
        _, pol = generate_synthetic(2000, 2, 2, 0.0, seed=3)
        assert 0.70 < pol.addition_allowed.mean() < 0.80
        assert 0.45 < pol.removal_allowed.mean() < 0.55

    def test_per_class_counts(self):
        ds, _ = generate_synthetic(10, 3, [4, 6, 2], 0.1, seed=4)
        assert np.bincount(ds.y).tolist() == [4, 6, 2]

    def test_class_densities(self):
        ds, _ = generate_synthetic(500, 2, 1, 0.0, seed=5, class_densities=[0.9, 0.1])
        assert ds.X[ds.y == 0].mean() > 0.8
        assert ds.X[ds.y == 1].mean() < 0.2

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            generate_synthetic(1, 2, 3, 0.0)


class TestSparseIO:
    def test_round_trip(self, tmp_path, rng):
        ds = toy_dataset([7, 9], dim=13, seed=6)
        ds.X[0, 3] = 0.25  # non-binary value survives too
        path = tmp_path / "ds.txt"
        write_sparse(path, ds)
        back = read_sparse(path)
        assert back.class_count == ds.class_count
        assert back.dim == ds.dim
        assert np.array_equal(back.X, ds.X)
        assert np.array_equal(back.y, ds.y)

    def test_format_example(self, tmp_path):
        path = tmp_path / "ds.txt"
        path.write_text("3 0:1 17:1\n")
        ds = read_sparse(path, dim=20, class_count=4)
        assert ds.y[0] == 3
        assert ds.X[0, 0] == 1 and ds.X[0, 17] == 1
        assert ds.X[0].sum() == 2

    def test_empty_feature_list(self, tmp_path):
        path = tmp_path / "ds.txt"
        path.write_text("2\n")
        ds = read_sparse(path, dim=5, class_count=3)
        assert ds.y[0] == 2
        assert np.all(ds.X[0] == 0)

    def test_comments_ignored(self, tmp_path):
        path = tmp_path / "ds.txt"
        path.write_text("# a remark\n1 0:1\n")
        ds = read_sparse(path, dim=2, class_count=2)
        assert len(ds) == 1

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "ds.txt"
        path.write_text("0 0:1\n1 nonsense\n")
        with pytest.raises(ValueError, match="line 2"):
            read_sparse(path, dim=3, class_count=2)

    def test_index_out_of_range(self, tmp_path):
        path = tmp_path / "ds.txt"
        path.write_text("0 9:1\n")
        with pytest.raises(ValueError, match="out of range"):
            read_sparse(path, dim=5, class_count=2)


class TestPolicyIO:
    def test_round_trip(self, tmp_path, rng):
        pol = random_policy(rng, 17)
        path = tmp_path / "policy.txt"
        write_policy(path, pol)
        back = read_policy(path)
        assert np.array_equal(back.addition_allowed, pol.addition_allowed)
        assert np.array_equal(back.removal_allowed, pol.removal_allowed)

    def test_bad_flags(self, tmp_path):
        path = tmp_path / "policy.txt"
        path.write_text("0 1 2\n")
        with pytest.raises(ValueError, match="line 1"):
            read_policy(path)
