"""Test suite for run configuration files and overrides"""
from pathlib import Path

import pytest
import yaml

from app.config import (
    GridConfig,
    RunConfig,
    apply_overrides,
    build_run_config,
    dump_run_config,
    expand_grid,
    load_grid_config,
    load_run_config,
    parse_override,
    subset_key,
)
from app.errors import BudgetMismatchError, InvalidConfigError
from tests.conftest import tiny_run_data

CONFIG_DIR = Path(__file__).parent.parent / "configs"


def test_defaults_follow_full_scale_protocol():
    cfg = RunConfig()
    assert cfg.budget == 300
    assert (cfg.split.base, cfg.split.expert, cfg.split.distill) == (40, 180, 80)
    assert cfg.pretrain.batch_size == 1024
    assert cfg.pretrain.simclr.kind == "lars" and cfg.pretrain.simclr.base_lr == 0.3
    assert cfg.pretrain.simsiam.kind == "sgd" and cfg.pretrain.simsiam.base_lr == 0.03
    assert cfg.cluster.k == 5
    assert cfg.lineval.lr == 30.0


def test_parse_override():
    assert parse_override("split.base=40") == (["split", "base"], 40)
    assert parse_override("distill.use_experts=false") == (["distill", "use_experts"], False)
    assert parse_override("name=abc") == (["name"], "abc")
    with pytest.raises(InvalidConfigError):
        parse_override("split.base")


def test_apply_overrides_copies():
    data = {"split": {"base": 1}}
    out = apply_overrides(data, ["split.base=2", "cluster.k=3"])
    assert out == {"split": {"base": 2}, "cluster": {"k": 3}}
    assert data == {"split": {"base": 1}}
    with pytest.raises(InvalidConfigError):
        apply_overrides({"name": "x"}, ["name.inner=1"])


def test_unknown_keys_rejected():
    with pytest.raises(InvalidConfigError):
        build_run_config({"epoch": 3})
    with pytest.raises(InvalidConfigError):
        build_run_config({"schema_version": 2})


def test_budget_must_add_up():
    with pytest.raises(BudgetMismatchError):
        build_run_config(tiny_run_data(), ["split.base=2"])
    # the staged split only binds pipeline methods
    assert build_run_config(tiny_run_data(method="simsiam"), ["split.base=2"]).baseline_epochs == 3
    with pytest.raises(BudgetMismatchError):
        build_run_config(tiny_run_data(method="simclr", epochs=4))


def test_temperature_must_be_positive():
    with pytest.raises(InvalidConfigError):
        build_run_config(tiny_run_data(), ["pretrain.temperature=0"])
    with pytest.raises(InvalidConfigError):
        build_run_config(tiny_run_data(), ["pretrain.temperature=-0.5"])
    with pytest.raises(InvalidConfigError):
        build_run_config(tiny_run_data(), ["pretrain.checkpoint_every=-1"])
    assert build_run_config(tiny_run_data(), ["pretrain.temperature=0.2"]).pretrain.temperature == 0.2


def test_no_expert_needs_plain_distill_method():
    """Cluster-expert distillation cannot run without its experts"""
    with pytest.raises(InvalidConfigError, match="use_experts"):
        build_run_config(tiny_run_data(distill={"use_experts": False}))
    cfg = build_run_config(tiny_run_data(method="simsiam+d", distill={"use_experts": False}))
    assert not cfg.distill.use_experts


def test_budget_error_is_a_config_error():
    assert issubclass(BudgetMismatchError, InvalidConfigError)


def test_schedule_seeds_are_stage_specific(tiny_run_config):
    a = tiny_run_config.schedule(1, "pretrain")
    b = tiny_run_config.schedule(1, "experts")
    assert a.seed != b.seed
    assert a.method == "simsiam"
    assert tiny_run_config.base_method == "simsiam"


def test_subset_labels_and_keys():
    cfg = build_run_config({"subset": {"kind": "balanced", "match_p": 10}})
    assert cfg.subset.resolved_total(5000, 10) == 20431
    assert cfg.subset.label(5000, 10) == "Balanced (rs.20431)"
    assert subset_key(cfg.subset) == "bal-p10"
    assert subset_key(build_run_config({}).subset) == "imb-p10"
    with pytest.raises(InvalidConfigError):
        build_run_config({"subset": {"kind": "balanced"}})


def test_dump_and_reload(tmp_path, tiny_run_config):
    path = dump_run_config(tiny_run_config, tmp_path / "config.yaml")
    assert load_run_config(path) == tiny_run_config
    assert load_run_config(path, ["seed=4"]).seed == 4


def test_load_errors(tmp_path):
    with pytest.raises(InvalidConfigError):
        load_run_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- a\n- b\n")
    with pytest.raises(InvalidConfigError):
        load_run_config(bad)


@pytest.mark.parametrize("name", ["desk.yaml", "cifar.yaml"])
def test_shipped_profiles_validate(name):
    cfg = load_run_config(CONFIG_DIR / name)
    assert cfg.split.total == cfg.budget


def test_cifar_profile_matches_protocol():
    cfg = load_run_config(CONFIG_DIR / "cifar.yaml")
    assert cfg.model.backbone.output_dim == 512
    assert cfg.budget == 300
    assert "requires an accelerator" in (CONFIG_DIR / "cifar.yaml").read_text().lower()


def test_expand_grid():
    grid = GridConfig(
        base=tiny_run_data(),
        output_dir="grids/g",
        subsets=[{"kind": "imbalanced", "p": 4}, {"kind": "balanced", "total": 20}],
        methods=["simsiam", "simsiam+c+d"],
        seeds=[0, 1],
        runs=[{"method": "simclr", "name": "extra", "output_dir": "grids/g/extra"}],
    )
    configs = expand_grid(grid)
    assert len(configs) == 9
    assert len({c.output_dir for c in configs}) == 9
    assert configs[0].name == "imb-p4_simsiam_s0"
    assert configs[0].output_dir == str(Path("grids/g") / "imb-p4_simsiam_s0")
    assert configs[-1].name == "extra"


def test_shipped_grids_expand():
    table = expand_grid(load_grid_config(CONFIG_DIR / "grid-cifar.yaml"))
    assert len(table) == 10
    assert {c.method for c in table} == {"simclr", "simsiam"}
    desk = expand_grid(load_grid_config(CONFIG_DIR / "grid-desk.yaml"))
    assert {c.method for c in desk} == {"simclr", "simsiam", "simsiam+c+d", "simsiam+d"}
    assert all(c.model.backbone.family == "tiny-conv" for c in desk)


def test_grid_file_with_inline_base(tmp_path):
    path = tmp_path / "grid.yaml"
    path.write_text(yaml.safe_dump({"base": tiny_run_data(), "methods": ["simsiam"], "subsets": [{"kind": "full"}]}))
    configs = expand_grid(load_grid_config(path))
    assert [c.subset.kind for c in configs] == ["full"]
