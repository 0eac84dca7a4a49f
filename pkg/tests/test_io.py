import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nodereg.io import (HEADER_SIZE, INTENT_VECTOR, VOX_OFFSET, BadMagicError, ConfigError,
                        HeaderSizeError, NiftiError, RawFormatError, TruncatedPayloadError,
                        UnsupportedDatatypeError, config_schema, csv_text, empty_header,
                        format_config, header_dtype, nifti_spacing, parse_config, read_csv,
                        read_nifti, read_pgm, read_raw, read_volume, report_rows,
                        write_loss_trace, write_nifti, write_raw, write_report,
                        write_slice_snapshot)
from nodereg.objective import LossConfig
from nodereg.synth import SynthSpec


def patch_header(path, **fields):
    raw = bytearray(path.read_bytes())
    hdr = np.frombuffer(bytes(raw[:HEADER_SIZE]), dtype=header_dtype("<"))[0].copy()
    for k, v in fields.items():
        hdr[k] = v
    raw[:HEADER_SIZE] = hdr.tobytes()
    path.write_bytes(bytes(raw))


# -- NIfTI-1 -----------------------------------------------------------------------

def test_float_volume_round_trip_is_bit_exact(tmp_path, rng):
    vol = rng.random((8, 8, 8)).astype(np.float32)
    write_nifti(tmp_path / "v.nii", vol)
    back, hdr = read_nifti(tmp_path / "v.nii")
    assert back.dtype == np.float64 and np.array_equal(back.astype(np.float32), vol)
    assert int(hdr["sizeof_hdr"]) == 348 and int(hdr["datatype"]) == 16
    assert (tmp_path / "v.nii").stat().st_size == VOX_OFFSET + 4 * 512


def test_payload_is_stored_in_fortran_order(tmp_path):
    vol = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_nifti(tmp_path / "v.nii", vol)
    payload = np.frombuffer((tmp_path / "v.nii").read_bytes()[VOX_OFFSET:], dtype="<f4")
    assert np.array_equal(payload, vol.ravel(order="F"))


@pytest.mark.parametrize("values,code", [((0, 200), 2), ((-5, 300), 4), ((0, 70000), 8)])
def test_label_volumes_use_small_integer_types(tmp_path, values, code):
    labels = np.array([[values[0], values[1]], [1, 0]], dtype=np.int64)
    write_nifti(tmp_path / "l.nii", labels, label=True)
    back, hdr = read_nifti(tmp_path / "l.nii")
    assert int(hdr["datatype"]) == code
    assert back.dtype.kind in "iu" and np.array_equal(back, labels)


@pytest.mark.parametrize("shape", [(2, 5, 6), (3, 4, 5, 6)])
def test_vector_field_round_trip(tmp_path, rng, shape):
    field = rng.standard_normal(shape).astype(np.float32)
    write_nifti(tmp_path / "f.nii", field, vector=True)
    back, hdr = read_nifti(tmp_path / "f.nii")
    assert int(hdr["intent_code"]) == INTENT_VECTOR and int(hdr["dim"][0]) == 5
    assert int(hdr["dim"][5]) == shape[0]
    assert np.array_equal(back.astype(np.float32), field)
    with pytest.raises(ValueError):
        write_nifti(tmp_path / "g.nii", field[:1], vector=True)


def test_scaling_is_applied_on_read(tmp_path):
    write_nifti(tmp_path / "s.nii", np.full((2, 2), 3, dtype=np.int16), label=True)
    patch_header(tmp_path / "s.nii", scl_slope=2.0, scl_inter=1.0)
    back, _ = read_nifti(tmp_path / "s.nii")
    assert back.dtype == np.float64 and np.all(back == 7.0)
    patch_header(tmp_path / "s.nii", scl_slope=0.0, scl_inter=5.0)
    assert np.all(read_nifti(tmp_path / "s.nii")[0] == 3)


def test_big_endian_files_are_read(tmp_path, rng):
    vol = rng.random((3, 4, 5)).astype(">f4")
    hdr = empty_header().astype(header_dtype(">"))
    hdr["dim"] = [3, 3, 4, 5, 1, 1, 1, 1]
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    body = vol.tobytes(order="F")
    (tmp_path / "be.nii").write_bytes(hdr.tobytes() + b"\0" * 4 + body)
    assert np.array_equal(read_nifti(tmp_path / "be.nii")[0], vol.astype(np.float64))


def test_float64_payloads_are_read(tmp_path, rng):
    vol = rng.random((4, 3))
    write_nifti(tmp_path / "d.nii", vol)
    patch_header(tmp_path / "d.nii", datatype=64, bitpix=64)
    raw = (tmp_path / "d.nii").read_bytes()[:VOX_OFFSET]
    (tmp_path / "d.nii").write_bytes(raw + vol.astype("<f8").tobytes(order="F"))
    assert np.array_equal(read_nifti(tmp_path / "d.nii")[0], vol)


def test_malformed_files_raise_distinct_errors(tmp_path, rng):
    path = tmp_path / "v.nii"
    write_nifti(path, rng.random((4, 4)))
    good = path.read_bytes()
    path.write_bytes(good[:100])
    with pytest.raises(HeaderSizeError):
        read_nifti(path)
    path.write_bytes(good)
    patch_header(path, sizeof_hdr=340)
    with pytest.raises(HeaderSizeError):
        read_nifti(path)
    path.write_bytes(good)
    patch_header(path, magic=b"ni1")
    with pytest.raises(BadMagicError):
        read_nifti(path)
    path.write_bytes(good)
    patch_header(path, datatype=32)
    with pytest.raises(UnsupportedDatatypeError):
        read_nifti(path)
    path.write_bytes(good[:-3])
    with pytest.raises(TruncatedPayloadError):
        read_nifti(path)
    kinds = {HeaderSizeError, BadMagicError, UnsupportedDatatypeError, TruncatedPayloadError}
    assert len(kinds) == 4 and all(issubclass(k, NiftiError) for k in kinds)


def test_header_fields_pass_through(tmp_path, rng):
    write_nifti(tmp_path / "a.nii", rng.random((3, 3, 3)), spacing=(0.5, 1.0, 2.0))
    _, hdr = read_nifti(tmp_path / "a.nii")
    hdr = hdr.copy()
    hdr["descrip"] = b"kept verbatim"
    hdr["qform_code"] = 1
    hdr["srow_x"] = (0.5, 0, 0, -10)
    write_nifti(tmp_path / "b.nii", rng.random((3, 3, 3)), header=hdr)
    _, out = read_nifti(tmp_path / "b.nii")
    assert bytes(out["descrip"]).rstrip(b"\0") == b"kept verbatim"
    assert int(out["qform_code"]) == 1 and float(out["srow_x"][3]) == -10.0
    assert nifti_spacing(out, 3) == (0.5, 1.0, 2.0)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.integers(0, 1000))
def test_nifti_round_trip_property(tmp_path_factory, dims, seed):
    path = tmp_path_factory.mktemp("nii") / "p.nii"
    vol = np.random.default_rng(seed).standard_normal(dims).astype(np.float32)
    write_nifti(path, vol)
    back = read_nifti(path)[0]
    assert np.array_equal(back.reshape(vol.shape).astype(np.float32), vol)


# -- DRV1 ----------------------------------------------------------------------------

@pytest.mark.parametrize("shape", [(7,), (5, 6), (3, 4, 5), (4, 1, 3)])
def test_raw_round_trip(tmp_path, rng, shape):
    vol = rng.standard_normal(shape).astype(np.float32)
    write_raw(tmp_path / "v.drv", vol)
    assert (tmp_path / "v.drv").read_bytes()[:4] == b"DRV1"
    back = read_raw(tmp_path / "v.drv", ndim=len(shape))
    assert back.dtype == np.float32 and np.array_equal(back, vol)
    assert np.array_equal(read_volume(tmp_path / "v.drv").reshape(shape), vol.astype(np.float64))


def test_raw_header_layout(tmp_path):
    write_raw(tmp_path / "v.drv", np.zeros((2, 3)))
    raw = (tmp_path / "v.drv").read_bytes()
    assert len(raw) == 16 + 4 * 6
    assert np.array_equal(np.frombuffer(raw[4:16], "<i4"), [2, 3, 1])
    assert read_raw(tmp_path / "v.drv").shape == (2, 3)


def test_raw_errors(tmp_path):
    write_raw(tmp_path / "v.drv", np.zeros((2, 3)))
    raw = (tmp_path / "v.drv").read_bytes()
    (tmp_path / "short.drv").write_bytes(raw[:-4])
    with pytest.raises(RawFormatError):
        read_raw(tmp_path / "short.drv")
    (tmp_path / "magic.drv").write_bytes(b"DRV2" + raw[4:])
    with pytest.raises(RawFormatError):
        read_raw(tmp_path / "magic.drv")
    with pytest.raises(RawFormatError):
        write_raw(tmp_path / "x.drv", np.zeros((2, 2, 2, 2)))


# -- PGM snapshots ------------------------------------------------------------------

def test_constant_volume_gives_uniform_snapshot(tmp_path):
    write_slice_snapshot(np.full((4, 5, 6), 0.3), 1, tmp_path / "c.pgm")
    img = read_pgm(tmp_path / "c.pgm")
    assert img.shape == (4, 6) and np.all(img == img[0, 0])


def test_snapshot_shape_and_range(tmp_path, rng):
    vol = rng.random((7, 5, 9))
    write_slice_snapshot(vol, 1, tmp_path / "s.pgm")
    img = read_pgm(tmp_path / "s.pgm")
    assert img.shape == (7, 9)
    assert img.min() == 0 and img.max() == 255
    assert (tmp_path / "s.pgm").read_bytes().startswith(b"P5\n9 7\n255\n")
    write_slice_snapshot(vol, 1, tmp_path / "t.pgm")
    assert (tmp_path / "s.pgm").read_bytes() == (tmp_path / "t.pgm").read_bytes()


def test_snapshot_of_2d_image(tmp_path):
    image = np.linspace(0, 1, 12).reshape(3, 4)
    write_slice_snapshot(image, 0, tmp_path / "i.pgm")
    img = read_pgm(tmp_path / "i.pgm")
    assert img[0, 0] == 0 and img[-1, -1] == 255 and img.shape == (3, 4)


# -- configuration ------------------------------------------------------------------

def test_config_parses_typed_values_and_comments():
    schema = config_schema(LossConfig, SynthSpec, exclude=())
    text = "# weights\nlambda_J = 1.5  # barrier\nepochs=20\nremap = false\nshape = 32, 48\n\n"
    values = parse_config(text, schema)
    assert values == {"lambda_J": 1.5, "epochs": 20, "remap": False, "shape": (32, 48)}


@pytest.mark.parametrize("text,fragment", [
    ("lambda_j = 1.0", "lambda_j"),
    ("epochs = 1\nepochs = 2", "epochs"),
    ("epochs = many", "epochs"),
    ("just a line", "key = value"),
])
def test_config_errors_name_the_problem(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text, config_schema(LossConfig))


def test_config_format_round_trip():
    schema = config_schema(SynthSpec, exclude=())
    values = {"shape": (16, 16), "warp_amplitude": 2.5, "remap": True, "n_blobs": 3}
    assert parse_config(format_config(values), schema) == values


# -- CSV ------------------------------------------------------------------------------

def test_csv_tables(tmp_path):
    text = csv_text(("a", "b"), [{"a": 1, "b": 0.1}, (2, 1e-20)])
    assert text == "a,b\n1,0.1\n2,1e-20\n"
    write_loss_trace(tmp_path / "loss.csv", [{"epoch": 0, "S": 1.0, "L_J": 0.0, "L_grad": 0.0,
                                              "L_mag": 0.0, "total": 1.0}])
    assert read_csv(tmp_path / "loss.csv")[0]["total"] == "1.0"


def test_report_rows_flatten_and_sort(tmp_path):
    report = {"mean_dice": 0.5, "dice_per_label": {2: 0.4, 1: 0.6}, "metric": "mind"}
    assert report_rows(report) == [("dice_per_label[1]", 0.6), ("dice_per_label[2]", 0.4),
                                   ("mean_dice", 0.5), ("metric", "mind")]
    write_report(tmp_path / "r.csv", report)
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "metric,value"
