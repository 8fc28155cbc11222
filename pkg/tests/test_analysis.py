import csv
import io

import numpy as np
import pytest

import oracles
from dcnn.analysis.ablation import AXIS_VALUES, expand_axes, run_ablation_grid
from dcnn.analysis.cam import (
    CamMap,
    cam_peak,
    compute_cam,
    normalize_cam,
    overlay,
    render_heatmap,
    sa_cam_raw,
    sc_cam_raw,
)
from dcnn.analysis.cost import CONVENTION, analyze, conv_cost, count_flops, count_params, parse_csv_totals
from dcnn.autograd import RngState, Tensor
from dcnn.config import ModelConfig
from dcnn.data import DatasetSpec, generate_synthetic, read_image, read_pnm
from dcnn.errors import ConfigError, DataError
from dcnn.model import build_model
from dcnn.training import TrainConfig

VARIANTS = [
    {},
    {"conv_mode": "conventional"},
    {"down_mode": "max_pool"},
    {"down_mode": "strided_conv"},
    {"bridge_accum": "concat"},
    {"up_mode": "bilinear"},
]


# -- closed-form costs -----------------------------------------------------------------------


def test_single_pointwise_conv_closed_form():
    row = conv_cost(3, 8, 1, 4)
    assert row.param_count == 3 * 8 + 8 == 32
    assert row.flop_count == 2 * 1 * 3 * 8 * 16 == 768
    assert row.output_shape == (8, 4, 4)


def test_grouped_and_strided_conv_closed_form():
    row = conv_cost(8, 8, 3, 10, padding=1, groups=8, bias=False)
    assert row.param_count == 72 and row.macs == 72 * 100
    assert conv_cost(3, 64, 4, 224, stride=4).output_shape == (64, 56, 56)


def test_nano_matches_hand_count():
    assert count_params(ModelConfig.preset("nano")).total_params == oracles.nano_param_hand_count()


def test_nano_matches_scripted_mac_oracle():
    assert count_flops(ModelConfig.preset("nano")).mac_total == oracles.nano_mac_script()


@pytest.mark.parametrize("preset", ["micro", "nano", "full"])
@pytest.mark.parametrize("variant", VARIANTS, ids=lambda v: ",".join(f"{k}={x}" for k, x in v.items()) or "base")
def test_analytic_count_equals_built_model(preset, variant):
    cfg = ModelConfig.preset(preset, **variant)
    assert count_params(cfg).total_params == build_model(cfg, RngState(0)).num_parameters()


@pytest.mark.parametrize("heads", [6, 8, 12])
def test_head_count_variants_match_built_model(heads):
    cfg = ModelConfig.preset("nano", num_heads=heads)
    assert count_params(cfg).total_params == build_model(cfg, RngState(0)).num_parameters()


@pytest.mark.parametrize("variant", [{}, {"bridge_accum": "concat", "down_mode": "strided_conv"}])
def test_every_parameter_belongs_to_exactly_one_row(variant):
    cfg = ModelConfig.preset("nano", **variant)
    report = analyze(cfg)
    rows = {r.name: r for r in report.rows}
    assert len(rows) == len(report.rows)
    per_row: dict[str, int] = {}
    for name, p in build_model(cfg, RngState(0)).named_parameters():
        owner = name.rsplit(".", 1)[0] if name.endswith((".weight", ".bias")) else name
        assert owner in rows, name
        per_row[owner] = per_row.get(owner, 0) + p.data.size
    for name, r in rows.items():
        assert r.param_count == per_row.get(name, 0), name


def test_totals_are_row_sums():
    report = analyze(ModelConfig.preset("full"))
    assert report.total_params == sum(r.param_count for r in report.rows)
    assert report.mac_total == sum(r.macs for r in report.rows)
    assert report.flop_total == sum(r.flop_count for r in report.rows)
    assert report.full_total == report.flop_total + sum(r.elementwise for r in report.rows)


def test_csv_round_trip():
    report = analyze(ModelConfig.preset("nano"))
    text = report.to_csv()
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == len(report.rows) + 1
    assert parse_csv_totals(text) == {
        "params": report.total_params,
        "macs": report.mac_total,
        "flops": report.flop_total,
        "elementwise_flops": report.elementwise_total,
    }


def test_report_text_states_convention_and_notes():
    report = analyze(ModelConfig.preset("full"))
    text = report.to_text(explain=True, reference=True)
    assert CONVENTION in text and "52.68M" in text and "11.0G" in text
    for note in report.notes:
        assert note in text


def test_full_preset_bands():
    report = analyze(ModelConfig.preset("full"))
    assert abs(report.total_params - 52.68e6) / 52.68e6 <= 0.10
    mac, flop = report.mac_total, report.flop_total
    assert (mac <= 11.0e9 <= flop) or min(abs(mac - 11.0e9), abs(flop - 11.0e9)) / 11.0e9 <= 0.25


def test_cost_report_is_pure():
    cfg = ModelConfig.preset("nano")
    assert analyze(cfg).to_csv() == analyze(cfg).to_csv()
    assert count_flops(cfg, (3, 64, 64)).mac_total > count_flops(cfg).mac_total


def test_separable_is_cheaper_than_conventional():
    for preset in ("nano", "full"):
        sep = count_params(ModelConfig.preset(preset)).total_params
        conv = count_params(ModelConfig.preset(preset, conv_mode="conventional")).total_params
        assert sep < conv


def test_closed_form_separable_inequality_for_full_widths():
    k = 9
    for c in (32, 64, 128):
        assert k * k * c + c * c < k * k * c * c


def test_head_count_leaves_parameters_unchanged():
    """Q, K, V and output projections are D x D whatever the head split, so the delta is zero."""
    d = 576
    analytic_delta = 0 * d  # per-head widths change, total projection widths do not
    base = count_params(ModelConfig.preset("full", num_heads=12)).total_params
    more = count_params(ModelConfig.preset("full", num_heads=16)).total_params
    assert more - base == analytic_delta
    assert count_flops(ModelConfig.preset("full", num_heads=16)).mac_total == count_flops(ModelConfig.preset("full")).mac_total


# -- CAM --------------------------------------------------------------------------------------


def test_one_hot_head_selects_one_channel():
    feats = np.random.default_rng(0).standard_normal((5, 4, 4))
    w = np.zeros((3, 5, 1, 1))
    w[1, 2] = 1.0
    cam = normalize_cam(sc_cam_raw(feats, w, 1))
    pos = np.maximum(feats[2], 0)
    np.testing.assert_allclose(cam, (pos - pos.min()) / (pos.max() - pos.min()), rtol=1e-6)


def test_sa_cam_lays_tokens_on_grid():
    tokens = np.zeros((9, 4))
    tokens[5, 3] = 2.0
    w = np.zeros((4, 2))
    w[3, 1] = 1.0
    grid = sa_cam_raw(tokens, w, 1)
    assert grid.shape == (3, 3) and grid[1, 2] == 2.0 and grid.sum() == 2.0


def test_constant_map_normalizes_to_zeros():
    np.testing.assert_array_equal(normalize_cam(np.full((4, 4), 3.0)), np.zeros((4, 4)))
    np.testing.assert_array_equal(normalize_cam(-np.ones((2, 2))), np.zeros((2, 2)))


def test_normalization_is_idempotent_and_bounded():
    raw = np.random.default_rng(1).standard_normal((6, 6))
    once = normalize_cam(raw)
    assert once.min() == 0.0 and once.max() == 1.0
    np.testing.assert_array_equal(normalize_cam(once), once)


@pytest.mark.parametrize("branch", ["sc", "sa", "fused"])
def test_compute_cam_on_model(branch):
    model = build_model(ModelConfig.preset("nano"), RngState(4))
    image = np.random.default_rng(4).uniform(0, 1, (3, 32, 32)).astype(np.float32)
    cam = compute_cam(model, image, 2, branch)
    assert cam.grid.shape == {"sc": (8, 8), "sa": (4, 4), "fused": (8, 8)}[branch]
    assert cam.grid.min() >= 0.0 and cam.grid.max() <= 1.0
    assert cam.branch == branch and cam.class_index == 2
    assert model.training
    again = compute_cam(model, Tensor(image[None]), 2, branch)
    np.testing.assert_array_equal(cam.grid, again.grid)


def test_compute_cam_rejects_bad_class_and_branch():
    model = build_model(ModelConfig.preset("nano"), RngState(4))
    image = np.zeros((3, 32, 32), np.float32)
    with pytest.raises(DataError):
        compute_cam(model, image, 4)
    with pytest.raises(ValueError):
        compute_cam(model, image, 0, "both")


def test_cam_peak_location():
    grid = np.zeros((4, 4), np.float32)
    grid[3, 0] = 1.0
    r, c = cam_peak(CamMap(grid, 0, "sc"), 32, 32)
    assert r >= 24 and c < 8


def test_zero_cam_overlay_is_base_and_ones_is_red():
    base = np.random.default_rng(2).uniform(0, 1, (3, 8, 8))
    np.testing.assert_allclose(overlay(CamMap(np.zeros((2, 2)), 0, "sc"), base), base)
    red = overlay(CamMap(np.ones((2, 2)), 0, "sc"), base)
    np.testing.assert_allclose(red[0], 1.0)
    np.testing.assert_allclose(red[1:], 0.0, atol=1e-12)


def test_render_heatmap_writes_readable_ppm(tmp_path):
    base = np.random.default_rng(3).uniform(0, 1, (3, 12, 12)).astype(np.float32)
    cam = CamMap(normalize_cam(np.random.default_rng(4).standard_normal((3, 3))), 1, "fused")
    render_heatmap(cam, base, tmp_path / "h.ppm")
    assert (tmp_path / "h.ppm").read_bytes()[:2] == b"P6"
    assert read_pnm(tmp_path / "h.ppm").shape == (3, 12, 12)
    render_heatmap(cam, base, tmp_path / "s.ppm", side_by_side=True)
    side = read_pnm(tmp_path / "s.ppm")
    assert side.shape == (3, 12, 24)
    np.testing.assert_allclose(side[:, :, :12], base, atol=0.5 / 255 + 1e-6)
    pil = pytest.importorskip("PIL.Image")
    with pil.open(tmp_path / "h.ppm") as im:
        assert im.size == (12, 12) and im.mode == "RGB"
    np.testing.assert_array_equal(read_image(tmp_path / "h.ppm"), read_pnm(tmp_path / "h.ppm"))


def test_zero_cam_heatmap_reproduces_base_bytes(tmp_path):
    base = generate_synthetic(DatasetSpec(samples_per_class=1))[0].image
    render_heatmap(CamMap(np.zeros((8, 8)), 0, "sc"), base, tmp_path / "z.ppm")
    np.testing.assert_array_equal(read_pnm(tmp_path / "z.ppm"), base)


def test_render_heatmap_reports_io_failure(tmp_path):
    with pytest.raises(OSError):
        render_heatmap(CamMap(np.zeros((2, 2)), 0, "sc"), np.zeros((3, 4, 4)), tmp_path / "missing" / "x.ppm")


# -- ablation driver ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(DatasetSpec(samples_per_class=2, seed=5))


def test_expand_axes():
    base = ModelConfig.preset("nano")
    assert expand_axes(base, []) == [("baseline", None, None)]
    plan = expand_axes(base, ["down_mode", "conv_mode"])
    assert [p[0] for p in plan] == ["baseline", "down_mode=max_pool", "down_mode=strided_conv", "conv_mode=conventional"]
    assert set(AXIS_VALUES) == {"conv_mode", "down_mode", "num_heads", "bridge_accum"}
    with pytest.raises(ConfigError):
        expand_axes(base, ["depth"])


def test_empty_axes_give_baseline_only(tiny_data):
    report = run_ablation_grid(ModelConfig.preset("nano"), [], TrainConfig(epochs=1, seed=2), tiny_data)
    assert [r.method for r in report.rows] == ["baseline"]


def test_conv_mode_axis_rows_and_determinism(tiny_data):
    cfg = TrainConfig(epochs=1, seed=2, log_seconds=False)
    a = run_ablation_grid(ModelConfig.preset("nano"), ["conv_mode"], cfg, tiny_data, val_data=tiny_data[:4])
    b = run_ablation_grid(ModelConfig.preset("nano"), ["conv_mode"], cfg, tiny_data, val_data=tiny_data[:4])
    assert [r.method for r in a.rows] == ["baseline", "conv_mode=conventional"]
    assert a.row("conv_mode=conventional").params > a.row("baseline").params
    for r in a.rows:
        assert r.params == r.analytic_params and r.val_top1 is not None
    assert a.to_csv() == b.to_csv()
    text = a.to_text()
    assert text.splitlines()[0].startswith("Methods") and "#Params" in text


def test_parallel_grid_matches_serial(tiny_data):
    cfg = TrainConfig(epochs=1, seed=2)
    base = ModelConfig.preset("nano")
    serial = run_ablation_grid(base, {"num_heads": [4, 6]}, cfg, tiny_data)
    parallel = run_ablation_grid(base, {"num_heads": [4, 6]}, cfg, tiny_data, workers=2)
    assert serial.to_csv() == parallel.to_csv()
