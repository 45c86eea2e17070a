import itertools
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcase.data import (BLOB_COL, BLOB_ROW, HEIGHT, WIDTH, Anatomy, SeverityCalibration, SiteSpec, blob_signal,
                          build_corpus, dataset_bytes, default_site_specs, generate_site, image_id,
                          images_from_bytes, load_corpus, read_dataset, read_manifest, render, split_corpus,
                          stratified_split, write_dataset, write_manifest)
from fedcase.errors import ConfigError, EmptyInputError, FormatError
from fedcase.federated import evaluate_f1
from fedcase.model import init_model

from conftest import small_sites


@pytest.fixture(scope="module")
def default_sites():
    specs = default_site_specs(7)
    return specs, [generate_site(s) for s in specs]


@pytest.fixture(scope="module")
def calibration():
    return SeverityCalibration.from_generator_params()


class TestSiteSpec:
    @pytest.mark.parametrize("field,value", [("positive_rate", 1.5), ("positive_rate", -0.1), ("noise_std", -1.0),
                                             ("crop_probability", 2.0), ("base_intensity", 300.0),
                                             ("n_images", -1), ("anatomy_contrast", -1.0)])
    def test_invalid_field_named(self, field, value):
        with pytest.raises(ConfigError, match=field):
            replace(SiteSpec(0), **{field: value})

    def test_dict_round_trip(self):
        s = default_site_specs(3)[1]
        assert SiteSpec.from_dict(s.to_dict()) == s

    def test_unknown_field(self):
        with pytest.raises(ConfigError):
            SiteSpec.from_dict({"site_id": 0, "colour": 3})


class TestGenerateSite:
    def test_flat_negative_site(self):
        spec = SiteSpec(0, 123.0, 0.0, 0.0, (0, 0), 0.0, 20, 5, anatomy_contrast=0.0)
        for im in generate_site(spec):
            assert im.label == 0 and np.all(im.pixels == 123)

    def test_severity_monotone_blob_region(self):
        noise = np.random.default_rng(0).normal(0, 6, (HEIGHT, WIDTH))
        hi = render(90, noise, 1.0).astype(float)
        lo = render(90, noise, 0.1).astype(float)
        region = (slice(int(BLOB_ROW) - 3, int(BLOB_ROW) + 4), slice(int(BLOB_COL) - 3, int(BLOB_COL) + 4))
        assert hi[region].mean() > lo[region].mean()

    def test_deterministic_bytes(self):
        spec = default_site_specs(7)[2]
        assert dataset_bytes(generate_site(spec)) == dataset_bytes(generate_site(spec))

    def test_size_and_label_severity(self, default_sites):
        for spec, ims in zip(*default_sites):
            assert len(ims) == spec.n_images
            for im in ims:
                assert (im.label == 1) == (im.severity > 0)
                assert im.pixels.shape == (HEIGHT, WIDTH)

    def test_positive_rate_within_three_sigma(self, default_sites):
        for spec, ims in zip(*default_sites):
            n, p = len(ims), spec.positive_rate
            k = sum(im.label for im in ims)
            assert abs(k - n * p) <= 3 * np.sqrt(n * p * (1 - p))

    def test_ids_unique(self, default_sites):
        ids = [im.id for ims in default_sites[1] for im in ims]
        assert len(ids) == len(set(ids))
        assert image_id(3, 7) == (3 << 32) | 7

    def test_crops_zero_bottom_rows(self):
        spec = SiteSpec(0, 100.0, 3.0, 0.5, (0, 0), 1.0, 30, 1)
        for im in generate_site(spec):
            assert np.all(im.pixels[-1] == 0) and np.any(im.pixels[0] != 0)

    def test_sites_separable_by_histogram(self, default_sites):
        def hist(ims):
            px = np.concatenate([im.pixels.ravel() for im in ims if im.label == 0])
            h = np.bincount(px // 8, minlength=32)
            return h / h.sum()

        hists = [hist(ims) for ims in default_sites[1]]
        for a, b in itertools.combinations(hists, 2):
            assert 0.5 * np.abs(a - b).sum() > 0.2  # total variation distance

    def test_anatomy_confined_to_upper_half(self):
        a = Anatomy.draw(np.random.default_rng(3), 30.0)
        f = a.field()
        assert np.all(f[HEIGHT // 2:] == 0) and np.abs(f[:HEIGHT // 2]).max() > 1.0
        assert np.all(Anatomy().field() == 0)


class TestSeverityMeasurement:
    def test_noiseless_templates(self, calibration):
        rng = np.random.default_rng(0)
        for base, dx, dy, s in itertools.product((60, 100, 140), (-3, 0, 3), (-2, 0, 2), np.linspace(0.1, 1, 7)):
            px = render(base, None, s, (BLOB_ROW + dy, BLOB_COL + dx), anatomy=Anatomy.draw(rng, 35.0))
            assert abs(calibration.estimate(px) - s) < 0.01

    def test_real_positive_images(self, default_sites, calibration):
        specs, sites = default_sites
        for ims in sites[:-1]:
            for im in ims:
                if im.label and np.any(im.pixels[-1]):
                    assert abs(calibration.estimate(im.pixels) - im.severity) <= 0.05

    def test_monotone_in_amplitude(self, calibration):
        noise = np.random.default_rng(1).normal(0, 4, (HEIGHT, WIDTH))
        est = [calibration.estimate(render(100, noise, s)) for s in (0.2, 0.4, 0.6, 0.8)]
        assert est == sorted(est) and len(set(est)) == 4
        flat = np.full((HEIGHT, WIDTH), 100.0)
        d2 = (np.arange(HEIGHT)[:, None] - BLOB_ROW) ** 2 + (np.arange(WIDTH)[None, :] - BLOB_COL) ** 2
        blob = np.exp(-d2 / (2 * 2.5 ** 2))
        assert blob_signal(flat + 60 * blob) > blob_signal(flat + 30 * blob)


class TestSplits:
    def test_twenty_percent_of_hundred(self):
        spec = SiteSpec(0, 100.0, 5.0, 0.3, (0, 0), 0.1, 100, 2)
        ood = SiteSpec(1, 90.0, 5.0, 0.3, (0, 0), 0.1, 10, 3)
        corpus = build_corpus([spec, ood], 0.2)
        c = corpus.clients[0]
        assert len(c.train) + len(c.validation) == 80 and len(corpus.id_test) == 20

    @settings(max_examples=30, deadline=None)
    @given(st.integers(10, 300), st.floats(0.05, 0.6), st.floats(0.05, 0.6), st.integers(0, 10 ** 6))
    def test_stratified_counts(self, n, rate, frac, seed):
        labels = (np.random.default_rng(seed).random(n) < rate).astype(int)
        from fedcase.model import LabeledImage
        ims = [LabeledImage(np.zeros((2, 2), np.uint8), int(l), 0.5 if l else 0.0, i) for i, l in enumerate(labels)]
        kept, held = stratified_split(ims, frac, np.random.default_rng(seed))
        n_pos = int(labels.sum())
        assert abs(sum(im.label for im in held) - round(frac * n_pos)) <= 1
        assert {im.id for im in kept}.isdisjoint({im.id for im in held})
        assert len(kept) + len(held) == n

    def test_default_corpus_layout(self):
        corpus = build_corpus(small_sites())
        assert len(corpus.clients) == 3 and len(corpus.ood_test) == small_sites()[-1].n_images
        seen = set()
        for c in corpus.clients:
            ids = [im.id for im in c.train + c.validation]
            assert seen.isdisjoint(ids)
            seen.update(ids)
        assert seen.isdisjoint(im.id for im in corpus.id_test + corpus.ood_test)
        assert abs(sum(c.z for c in corpus.clients) - 1.0) < 1e-12
        for c in corpus.clients:
            n_val = len(c.validation)
            assert n_val == int(np.floor(0.2 * (len(c.train) + n_val) + 0.5))

    def test_stratified_test_positive_count(self, default_sites):
        specs, sites = default_sites
        corpus = split_corpus(sites, specs)
        for spec, ims in zip(specs[:-1], sites[:-1]):
            pos = sum(im.label for im in ims)
            test_pos = sum(im.label for im in corpus.id_test if im.id >> 32 == spec.site_id)
            assert abs(test_pos - round(0.2 * pos)) <= 1

    @pytest.mark.parametrize("frac", [0.0, 1.0, -0.2, 1.5])
    def test_fraction_rejected(self, frac):
        with pytest.raises(ConfigError):
            build_corpus(small_sites(), test_fraction=frac)

    def test_empty_ood_rejected_downstream(self):
        sites = list(small_sites())
        sites[-1] = replace(sites[-1], n_images=0)
        corpus = build_corpus(sites)
        assert corpus.ood_test == []
        with pytest.raises(EmptyInputError):
            evaluate_f1(init_model(), corpus.ood_test)

    def test_needs_ood_site(self):
        with pytest.raises(ConfigError):
            build_corpus(small_sites()[:1])


class TestFiles:
    def test_round_trip(self, tmp_path):
        ims = generate_site(small_sites()[1])
        path = write_dataset(ims, tmp_path / "s.fcds")
        back = read_dataset(path)
        assert len(back) == len(ims)
        for a, b in zip(ims, back):
            assert (a.id, a.label, a.severity) == (b.id, b.label, b.severity)
            assert a.pixels.tobytes() == b.pixels.tobytes()
        assert dataset_bytes(back) == path.read_bytes()

    def test_layout(self):
        ims = generate_site(SiteSpec(2, 50.0, 1.0, 0.5, (0, 0), 0.0, 2, 9))
        blob = dataset_bytes(ims)
        assert blob[:4] == b"FCDS" and int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 2
        assert blob[12:14] == (32).to_bytes(2, "little") and blob[14:16] == (32).to_bytes(2, "little")
        assert int.from_bytes(blob[16:24], "little") == ims[0].id
        assert len(blob) == 16 + 2 * (8 + 1 + 8 + 1024) + 4

    def test_corruption(self):
        blob = bytearray(dataset_bytes(generate_site(SiteSpec(0, 50.0, 1.0, 0.5, (0, 0), 0.0, 3, 9))))
        blob[40] ^= 0xFF
        with pytest.raises(FormatError):
            images_from_bytes(bytes(blob))

    def test_manifest_and_corpus_reload(self, tmp_path):
        specs = small_sites()
        for s in specs:
            write_dataset(generate_site(s), tmp_path / f"site_{s.site_id}.fcds")
        write_manifest(specs, tmp_path / "manifest.json", 0.2, 0.2)
        doc = json.loads((tmp_path / "manifest.json").read_text())
        assert doc["schema_version"] == 1 and [s["role"] for s in doc["sites"]] == ["client"] * 3 + ["ood"]
        assert read_manifest(tmp_path / "manifest.json")["specs"] == list(specs)
        a, b = load_corpus(tmp_path), build_corpus(specs)
        assert [im.id for im in a.ood_test] == [im.id for im in b.ood_test]
        for ca, cb in zip(a.clients, b.clients):
            assert [im.id for im in ca.train] == [im.id for im in cb.train]
            assert [im.id for im in ca.validation] == [im.id for im in cb.validation]

    def test_manifest_schema_checked(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"schema_version": 99, "sites": []}))
        with pytest.raises(FormatError):
            read_manifest(tmp_path / "manifest.json")
