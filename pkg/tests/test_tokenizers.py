import logging
import math

import pytest
from hypothesis import given, strategies as st

from tokencom.errors import AgreementImpossible, ConfigurationError
from tokencom.tokenizers import (
    RESOLUTIONS, TokenizerSpec, VideoParams, compatible_pairs, compression_rate, h265_ladder,
    load_catalog, quality_of, required_bitrate,
)

CATALOG = load_catalog()
BY_TAG = {s.name_tag: s for s in CATALOG}
DV8, DV4, HEVC, BSQ = (BY_TAG[t] for t in (
    "Cosmos-0.1-Tokenizer-DV8x16x16", "Cosmos-0.1-Tokenizer-DV4x8x8", "HEVC-medium", "BSQ-VAE"))


def spec(**kw):
    base = dict(name_tag="T", mu_f=1.0, mu_h=1.0, mu_w=1.0, codebook_size=2, psnr=30.0, ssim=0.9,
                rfvd=1.0, bpp_declared=1.0)
    base.update(kw)
    return TokenizerSpec(**base)


def test_catalog_rows_and_declared_rates():
    assert [s.name_tag for s in CATALOG] == [
        "Cosmos-0.1-Tokenizer-DV8x16x16", "Cosmos-0.1-Tokenizer-DV4x8x8", "HEVC-medium", "BSQ-VAE"]
    for s, bpp in zip(CATALOG, (0.008, 0.063, 0.084, 0.127)):
        assert abs(compression_rate(s) - bpp) <= 1e-3


def test_cosmos_rates_are_exact_powers_of_two():
    assert compression_rate(DV8) == 16 / 2048 == 0.0078125
    assert compression_rate(DV4) == 16 / 256 == 0.0625


def test_uncompressed_binary_codebook():
    assert compression_rate(spec()) == 1.0


def test_codebook_below_two_rejected():
    with pytest.raises(ConfigurationError):
        compression_rate(spec(codebook_size=1))


def test_required_bitrate_examples():
    full_hd = RESOLUTIONS["1080p"]
    assert required_bitrate(DV8, full_hd) == 388_800.0
    assert required_bitrate(0.127, full_hd) == pytest.approx(6.32e6, rel=1e-3)
    assert required_bitrate(DV8, VideoParams(1080, 1920, fps=0.0)) == 0.0


def test_quality_lookup():
    assert quality_of(BSQ, "psnr") == 38.41
    assert quality_of(DV8, "ssim") == 0.714
    assert quality_of(HEVC, "psnr") == 33.21
    assert quality_of(DV8, "rfvd") == -241.52
    with pytest.raises(ConfigurationError):
        quality_of(BSQ, "vmaf")


def test_quality_monotone_in_rate():
    ordered = sorted(CATALOG, key=compression_rate)
    for a, b in zip(ordered, ordered[1:]):
        assert a.psnr <= b.psnr
        assert a.ssim <= b.ssim
        assert a.rfvd >= b.rfvd


@given(st.floats(1e-4, 2.0), st.floats(1e-4, 2.0), st.integers(1, 4000), st.integers(1, 4000),
       st.floats(1.0, 120.0))
def test_bitrate_increasing_in_eta_and_linear_in_dimensions(e1, e2, h, w, fps):
    v = VideoParams(h, w, fps)
    lo, hi = sorted((e1, e2))
    if lo < hi:
        assert required_bitrate(lo, v) < required_bitrate(hi, v)
    base = required_bitrate(e1, v)
    assert required_bitrate(e1, VideoParams(2 * h, w, fps)) == pytest.approx(2 * base, rel=1e-12)
    assert required_bitrate(e1, VideoParams(h, 3 * w, fps)) == pytest.approx(3 * base, rel=1e-12)
    assert required_bitrate(e1, VideoParams(h, w, fps / 2)) == pytest.approx(base / 2, rel=1e-12)


def test_video_params_validation():
    with pytest.raises(ConfigurationError):
        VideoParams(0, 10)
    with pytest.raises(ConfigurationError):
        VideoParams(10, 10, fps=-1)


def test_compatible_pairs_intersection():
    pairs = compatible_pairs(CATALOG, ["BSQ-VAE", "Cosmos-0.1-Tokenizer-DV4x8x8"])
    assert len(pairs) == 2
    assert pairs.tags == ("Cosmos-0.1-Tokenizer-DV4x8x8", "BSQ-VAE")
    assert pairs[1] is DV4 and pairs.index_of("BSQ-VAE") == 2
    with pytest.raises(IndexError):
        pairs[0]


def test_full_catalog_ordering():
    pairs = compatible_pairs(CATALOG, [s.name_tag for s in reversed(CATALOG)])
    assert pairs.tags == tuple(s.name_tag for s in CATALOG)


def test_unknown_tags_only_is_impossible(caplog):
    with caplog.at_level(logging.WARNING):
        with pytest.raises(AgreementImpossible):
            compatible_pairs(CATALOG, ["LlamaGen-Tokenizer"])
    assert "LlamaGen-Tokenizer" in caplog.text


def test_unknown_tags_are_ignored_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        pairs = compatible_pairs(CATALOG, ["LlamaGen-Tokenizer", "HEVC-medium"], user_id=5)
    assert pairs.tags == ("HEVC-medium",) and pairs.ignored == ("LlamaGen-Tokenizer",)
    assert "user 5" in caplog.text


@given(st.sets(st.sampled_from([s.name_tag for s in CATALOG] + ["X", "Y", "Z"]), min_size=1))
def test_pair_count_matches_intersection(tags):
    known = tags & set(BY_TAG)
    if not known:
        with pytest.raises(AgreementImpossible):
            compatible_pairs(CATALOG, sorted(tags))
        return
    pairs = compatible_pairs(CATALOG, sorted(tags))
    assert len(pairs) == len(known)
    etas = [compression_rate(p) for p in pairs.pairs]
    assert etas == sorted(etas)


CATALOG_HEADER = "name_tag,mu_f,mu_h,mu_w,codebook_size,psnr,ssim,rfvd,bpp_declared\n"


def test_catalog_file_validation(tmp_path):
    good = tmp_path / "ok.csv"
    good.write_text("# comment\n" + CATALOG_HEADER + "A,1,1,1,2,30,0.9,1,1.0\n")
    assert [s.name_tag for s in load_catalog(good)] == ["A"]
    for name, body in {
        "dup": "A,1,1,1,2,30,0.9,1,1.0\nA,1,1,1,2,30,0.9,1,1.0\n",
        "bpp": "A,1,1,1,2,30,0.9,1,0.5\n",
        "mu": "A,2,1,1,2,30,0.9,1,2.0\n",
        "psnr": "A,1,1,1,2,-1,0.9,1,1.0\n",
        "empty": "",
    }.items():
        p = tmp_path / f"{name}.csv"
        p.write_text(CATALOG_HEADER + body)
        with pytest.raises(ConfigurationError):
            load_catalog(p)
    bad_header = tmp_path / "hdr.csv"
    bad_header.write_text("tag,mu\nA,1\n")
    with pytest.raises(ConfigurationError):
        load_catalog(bad_header)


def test_h265_ladder_operating_points():
    ladder = h265_ladder()
    assert ladder.bpp == (0.021, 0.042, 0.084, 0.168)
    assert ladder.psnr == (27.21, 30.21, 33.21, 36.21)
    v = RESOLUTIONS["1080p"]
    rates = [required_bitrate(b, v) for b in ladder.bpp]
    assert ladder.select(rates[2], v) == (2, False)
    assert ladder.select(math.nextafter(rates[2], 0), v) == (1, False)
    assert ladder.select(1e12, v) == (3, False)
    assert ladder.select(rates[0] * 0.5, v) == (0, True)
