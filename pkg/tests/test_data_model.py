import json

import numpy as np
import pandas as pd
import pytest

from fgad.data import (
    DatasetBundle,
    ExpressionMatrix,
    MixedSchema,
    PreprocessConfig,
    SyntheticSpec,
    TargetSpec,
    domain_onehot,
    encode_mixed,
    load_csv,
    preprocess,
    synth_generate,
    write_csv,
)
from fgad.errors import DataError


def make_matrix(values, names=None, labels=None):
    values = np.asarray(values, dtype=float)
    names = names or [f"f{i}" for i in range(values.shape[1])]
    ids = [f"i{i}" for i in range(values.shape[0])]
    return ExpressionMatrix(values, tuple(names), tuple(ids), labels)


class TestExpressionMatrix:
    def test_rejects_nonfinite(self):
        with pytest.raises(DataError, match="non-finite"):
            make_matrix([[1.0, np.nan]])

    def test_rejects_feature_name_mismatch(self):
        with pytest.raises(DataError, match="feature_names"):
            ExpressionMatrix(np.ones((2, 3)), ("a",), ("r0", "r1"))

    def test_values_are_immutable(self):
        m = make_matrix([[1.0, 2.0]])
        with pytest.raises(ValueError):
            m.values[0, 0] = 5.0

    def test_reference_rejects_anomaly_labels(self):
        ref = make_matrix([[1.0]], labels=("anomaly_0",))
        with pytest.raises(DataError, match="normal labels"):
            DatasetBundle(ref, (), ())


class TestLoadCsv:
    def write(self, tmp_path, name, frame):
        path = tmp_path / name
        frame.to_csv(path, index=False)
        return path

    def manifest(self, tmp_path, entries):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"files": entries}))
        return path

    def test_identity_alignment(self, tmp_path):
        frame = pd.DataFrame({"a": [1.0, 2.0], "b": [3.0, 4.0]})
        self.write(tmp_path, "ref.csv", frame)
        self.write(tmp_path, "t0.csv", frame)
        manifest = self.manifest(tmp_path, [
            {"path": "ref.csv", "role": "reference"},
            {"path": "t0.csv", "role": "target", "domain_id": 0},
        ])
        bundle = load_csv(manifest)
        assert bundle.n_targets == 1
        assert bundle.feature_names == ("a", "b")
        np.testing.assert_array_equal(bundle.targets[0].values, frame.to_numpy())

    def test_permuted_columns_reordered(self, tmp_path):
        self.write(tmp_path, "ref.csv", pd.DataFrame({"a": [1.0], "b": [2.0]}))
        self.write(tmp_path, "t0.csv", pd.DataFrame({"b": [20.0], "a": [10.0]}))
        manifest = self.manifest(tmp_path, [
            {"path": "ref.csv", "role": "reference"},
            {"path": "t0.csv", "role": "target", "domain_id": 0},
        ])
        bundle = load_csv(manifest)
        np.testing.assert_array_equal(bundle.targets[0].values, [[10.0, 20.0]])

    def test_missing_feature_names_offender(self, tmp_path):
        self.write(tmp_path, "ref.csv", pd.DataFrame({"a": [1.0], "b": [2.0]}))
        self.write(tmp_path, "t0.csv", pd.DataFrame({"a": [1.0]}))
        manifest = self.manifest(tmp_path, [
            {"path": "ref.csv", "role": "reference"},
            {"path": "t0.csv", "role": "target", "domain_id": 0},
        ])
        with pytest.raises(DataError, match=r"missing features \['b'\]"):
            load_csv(manifest)

    def test_non_numeric_cell_reports_row_col(self, tmp_path):
        self.write(tmp_path, "ref.csv", pd.DataFrame({"a": ["1.5", "oops"]}))
        manifest = self.manifest(tmp_path, [{"path": "ref.csv", "role": "reference"}])
        with pytest.raises(DataError, match=r"'oops' at row 1 column 'a'"):
            load_csv(manifest)

    def test_unlabeled_instances_get_unknown(self, tmp_path):
        self.write(tmp_path, "ref.csv", pd.DataFrame({"a": [1.0]}))
        manifest = self.manifest(tmp_path, [{"path": "ref.csv", "role": "reference"}])
        bundle = load_csv(manifest)
        assert bundle.reference.labels == ("unknown",)


class TestPreprocess:
    def test_identity_config_unchanged(self, tiny_bundle):
        out = preprocess(tiny_bundle, PreprocessConfig())
        np.testing.assert_array_equal(out.reference.values, tiny_bundle.reference.values)
        assert out.feature_names == tiny_bundle.feature_names

    def test_log_of_scaled_counts(self):
        # rows share the total, so scaling to the median total is the identity
        ref = make_matrix([[2.0, 2.0], [1.0, 3.0]])
        bundle = DatasetBundle(ref, (), ())
        out = preprocess(bundle, PreprocessConfig(total_scale=True, log1p=True))
        np.testing.assert_allclose(out.reference.values[0], [np.log(3.0), np.log(3.0)])

    def test_constant_feature_dropped_by_variance_filter(self):
        ref = make_matrix([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
        bundle = DatasetBundle(ref, (), ())
        out = preprocess(bundle, PreprocessConfig(top_k_features=1))
        assert out.feature_names == ("f0",)

    def test_zero_total_instance_named(self):
        ref = make_matrix([[0.0, 0.0], [1.0, 1.0]])
        bundle = DatasetBundle(ref, (), ())
        with pytest.raises(DataError, match="i0"):
            preprocess(bundle, PreprocessConfig(total_scale=True))

    def test_top_k_exceeding_features_rejected(self, tiny_bundle):
        with pytest.raises(DataError, match="exceeds feature count"):
            preprocess(tiny_bundle, PreprocessConfig(top_k_features=17))


class TestEncodeMixed:
    def test_categorical_one_hot_levels(self):
        frame = pd.DataFrame({"color": ["r", "g", "b", "g"], "x": [0.0, 1.0, 2.0, 3.0]})
        matrix, warnings = encode_mixed(frame, MixedSchema(("x",), ("color",)))
        assert matrix.feature_names == ("color=b", "color=g", "color=r", "x")
        assert not warnings
        np.testing.assert_array_equal(matrix.values[:, 0], [0, 0, 1, 0])

    def test_constant_continuous_zeroed_with_warning(self):
        frame = pd.DataFrame({"x": [7.0, 7.0]})
        matrix, warnings = encode_mixed(frame, MixedSchema(("x",), ()))
        np.testing.assert_array_equal(matrix.values, [[0.0], [0.0]])
        assert any("constant" in w for w in warnings)

    def test_unseen_category_zero_block_and_warning(self):
        ref = pd.DataFrame({"proto": ["udp", "udp"], "x": [0.0, 1.0]})
        target = pd.DataFrame({"proto": ["tcp"], "x": [0.5]})
        schema = MixedSchema(("x",), ("proto",))
        from fgad.data import MixedEncoder

        enc = MixedEncoder(schema, ref)
        matrix, warnings = enc.transform(target)
        np.testing.assert_array_equal(matrix.values, [[0.0, 0.5]])
        assert any("unseen" in w for w in warnings)

    def test_domain_defining_column_excluded(self):
        # the connection-protocol field defines the domain split, so the
        # schema omits it and only the remaining fields are encoded
        frame = pd.DataFrame(
            {"protocol_type": ["udp", "tcp"], "duration": [1.0, 3.0], "flag": ["S0", "SF"]}
        )
        matrix, _ = encode_mixed(frame, MixedSchema(("duration",), ("flag",)))
        assert all("protocol_type" not in name for name in matrix.feature_names)
        assert matrix.n_features == 3  # 2 flag levels + duration


class TestSynthGenerate:
    def test_zero_shift_zero_noise_identical_distributions(self):
        spec = SyntheticSpec(
            n_features=6, n_normal_types=1, n_anomaly_subtypes=1, n_domains=1,
            content_separation=4.0, domain_shift_magnitude=0.0, noise_sigma=0.0,
            reference_size=5, targets=(TargetSpec(6, 0.0),), seed=3,
        )
        bundle = synth_generate(spec)
        np.testing.assert_array_equal(
            bundle.targets[0].values, np.tile(bundle.reference.values[0], (6, 1))
        )

    def test_noiseless_target_is_prototype_plus_offset(self):
        spec = SyntheticSpec(
            n_features=6, n_normal_types=1, n_anomaly_subtypes=1, n_domains=1,
            content_separation=4.0, domain_shift_magnitude=2.5, noise_sigma=0.0,
            reference_size=4, targets=(TargetSpec(5, 0.0),), seed=3,
        )
        bundle = synth_generate(spec)
        proto = bundle.metadata["prototypes"][0]
        offset = bundle.metadata["domain_offsets"][0]
        assert np.linalg.norm(offset) == pytest.approx(2.5)
        np.testing.assert_allclose(bundle.targets[0].values, np.tile(proto + offset, (5, 1)))

    def test_mean_shift_matches_offset_monte_carlo(self):
        spec = SyntheticSpec(
            n_features=20, n_normal_types=2, n_anomaly_subtypes=3, n_domains=2,
            content_separation=10.0, domain_shift_magnitude=5.0, noise_sigma=1.0,
            reference_size=1500, targets=(TargetSpec(1500, 0.0), TargetSpec(100, 0.0)),
            seed=7,
        )
        bundle = synth_generate(spec)
        ref_types = bundle.metadata["normal_type_ids"]["ref"]
        t0_types = bundle.metadata["normal_type_ids"]["t0"]
        offset = bundle.metadata["domain_offsets"][0]
        for t in range(2):
            ref_rows = bundle.reference.values[ref_types == t]
            t0_rows = bundle.targets[0].values[t0_types == t]
            diff = t0_rows.mean(axis=0) - ref_rows.mean(axis=0)
            tol = 4.0 * spec.noise_sigma * np.sqrt(1 / len(ref_rows) + 1 / len(t0_rows))
            assert np.all(np.abs(diff - offset) < tol)

    def test_reference_contains_only_normals(self, tiny_bundle):
        assert set(tiny_bundle.reference.labels) == {"normal"}

    def test_equal_seeds_bit_identical(self, tiny_spec):
        a = synth_generate(tiny_spec)
        b = synth_generate(tiny_spec)
        np.testing.assert_array_equal(a.reference.values, b.reference.values)
        for ta, tb in zip(a.targets, b.targets):
            np.testing.assert_array_equal(ta.values, tb.values)
            assert ta.labels == tb.labels

    def test_subtype_restriction_honored(self):
        spec = SyntheticSpec(
            n_features=6, n_normal_types=1, n_anomaly_subtypes=3, n_domains=2,
            content_separation=4.0, domain_shift_magnitude=1.0, noise_sigma=0.1,
            reference_size=10,
            targets=(TargetSpec(40, 0.5, (0,)), TargetSpec(40, 0.5, (1, 2))),
            seed=3,
        )
        bundle = synth_generate(spec)
        assert set(bundle.targets[0].labels) == {"normal", "anomaly_0"}
        assert set(bundle.targets[1].labels) == {"normal", "anomaly_1", "anomaly_2"}


class TestRoundTrip:
    def test_write_then_load_preserves_values_and_labels(self, tiny_bundle, tmp_path):
        manifest = write_csv(tiny_bundle, tmp_path)
        loaded = load_csv(manifest)
        np.testing.assert_array_equal(loaded.reference.values, tiny_bundle.reference.values)
        assert loaded.reference.labels == tiny_bundle.reference.labels
        for a, b in zip(loaded.targets, tiny_bundle.targets):
            np.testing.assert_array_equal(a.values, b.values)
            assert a.labels == b.labels
            assert a.instance_ids == b.instance_ids


def test_domain_onehot_reference_rows_are_zero():
    onehot = domain_onehot(np.array([-1, 0, 1]), 2)
    np.testing.assert_array_equal(onehot, [[0, 0], [1, 0], [0, 1]])
    with pytest.raises(DataError):
        domain_onehot(np.array([2]), 2)
