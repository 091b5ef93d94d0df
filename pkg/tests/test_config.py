import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from simdis.config import (
    ALL_VIEWS,
    ConfigError,
    DataConfig,
    Scheme,
    SchemeConfig,
    View,
    ViewTargetSet,
    canonical_scheme_targets,
    config_from_dict,
    load_config,
    write_config,
)


def _write(tmp_path, data):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(data))
    return p


def test_7v_without_targets_gets_all_seven(tmp_path):
    cfg = load_config(_write(tmp_path, {"scheme": "simdis_on_7v"}))
    assert cfg.view_targets == ALL_VIEWS
    assert len(cfg.view_targets) == 7


@pytest.mark.parametrize(
    "raw, field",
    [
        ({"tau_base": 1.5}, "tau_base"),
        ({"scheme": "simdis_off"}, "teacher_checkpoint"),
        ({"epochs": 0}, "epochs"),
        ({"scheme": "nope"}, "scheme"),
        ({"scheme": "custom"}, "view_targets"),
        ({"scheme": "custom", "view_targets": ["X_v"]}, "view_targets"),
        ({"scheme": "custom", "view_targets": ["T_v", "T_v"]}, "view_targets"),
        ({"data": {"bogus": 1}}, "data.bogus"),
        ({"batch_sz": 3}, "batch_sz"),
        ({"scheme": "simdis_on_7v", "view_targets": ["T_v"]}, "view_targets"),
        ({"distill_weight": -1.0}, "distill_weight"),
    ],
)
def test_invalid_configs_name_the_field(tmp_path, raw, field):
    with pytest.raises(ConfigError, match=field):
        load_config(_write(tmp_path, raw))


def test_parse_failure_is_a_config_error(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("scheme: [unclosed")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_offline_accepts_checkpoint_or_pretraining():
    SchemeConfig(scheme="simdis_off", teacher_checkpoint="t.pt")
    SchemeConfig(scheme="simdis_off", pretrain_teacher=True)


def test_canonical_targets():
    assert canonical_scheme_targets("simdis_on_7v").to_list() == [
        "S_vp", "Shat_v", "Shat_vp", "T_v", "T_vp", "That_v", "That_vp"
    ]
    assert canonical_scheme_targets("simdis_on") == ViewTargetSet([View.THAT_VP])
    assert canonical_scheme_targets("simdis_off") == ViewTargetSet([View.THAT_VP])
    with pytest.raises(ConfigError):
        canonical_scheme_targets("teacher_only")


def test_canonical_targets_are_deterministic():
    for s in ("simdis_on", "simdis_off", "simdis_on_7v"):
        assert canonical_scheme_targets(s) == canonical_scheme_targets(s)


def test_view_target_set_helpers():
    vts = ViewTargetSet(["That_vp", "Shat_vp"])
    assert vts.distill_members == (View.THAT_VP,)
    assert vts.num_views == 2
    assert vts.uses_teacher
    assert ViewTargetSet(["Shat_vp"]).num_views == 1
    assert not ViewTargetSet(["S_vp", "Shat_v"]).uses_teacher


_valid_schemes = st.sampled_from(["teacher_only", "simdis_on", "simdis_on_7v", "simdis_off", "custom"])


@settings(max_examples=40, deadline=None)
@given(
    scheme=_valid_schemes,
    targets=st.sets(st.sampled_from([v.value for v in View]), min_size=1),
    epochs=st.integers(1, 500),
    tau=st.floats(0.0, 0.999),
    seed=st.integers(0, 2**31),
    lam=st.floats(0.0, 10.0),
    strength=st.floats(0.0, 2.0),
)
def test_round_trip(tmp_path_factory, scheme, targets, epochs, tau, seed, lam, strength):
    kw = dict(scheme=scheme, epochs=epochs, tau_base=tau, seed=seed, distill_weight=lam)
    if scheme == "custom":
        kw["view_targets"] = ViewTargetSet(targets)
    if scheme in ("simdis_on", "simdis_off") and ViewTargetSet(targets).distill_members:
        kw["view_targets"] = ViewTargetSet(targets)
    if scheme == "simdis_off":
        kw["teacher_checkpoint"] = "teacher.pt"
    cfg = SchemeConfig(**kw, data=DataConfig(strength=strength))
    path = write_config(cfg, tmp_path_factory.mktemp("rt") / "c.yaml")
    assert load_config(path) == cfg
    assert config_from_dict(cfg.to_dict()) == cfg


def test_scheme_enum_accepts_strings():
    assert SchemeConfig(scheme="simdis_on").scheme is Scheme.SIMDIS_ON
