from pathlib import Path

import pytest

from monodomain_uq.config import SCHEMA, default_config, parse_config, parse_config_text
from monodomain_uq.errors import ConfigurationError
from monodomain_uq.qoi import ActionPotential, TransmembraneField

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults():
    cfg = default_config()
    ionic = cfg.ionic()
    assert (ionic.alpha, ionic.u_th, ionic.u_peak) == (1.4e-3, 28.0, 115.0)
    assert cfg.levels == 4 and cfg.finest == 3
    assert cfg.stimulus().x0 == (0.0, 0.0, 0.0) and cfg.stimulus().t1 == 0.16
    assert cfg.newton().strategy == "LNIG" and cfg.newton().block_steps == 2
    assert cfg.covariance().theta == 0.3


def test_sections_and_overrides():
    cfg = parse_config_text("[hierarchy]\nlevels = 2\n[kl]\nmean = 1, 2, 3\n"
                            "[qoi]\nquantities = field; action_potential@0.25,0,0\n")
    assert cfg.hierarchy().L == 1
    assert cfg.covariance().mean == (1.0, 2.0, 3.0)
    assert cfg.quantities() == [TransmembraneField(), ActionPotential((0.25, 0.0, 0.0))]
    longer = cfg.with_overrides(hierarchy={"T": 0.48})
    assert longer.hierarchy()[0].m == 4 and cfg.hierarchy()[0].m == 3


@pytest.mark.parametrize("text, match", [
    ("[kl]\ntheta = 0\n", "kl.theta"),
    ("[kl]\ntheta = -1\n", "kl.theta"),
    ("[hierarchy]\ntype = nonnested\nh = 0.25, 0.5\n", "hierarchy.h"),
    ("[solver]\nbogus = 1\n", "unknown key solver.bogus"),
    ("[extras]\na = 1\n", "unknown section"),
    ("[hierarchy]\nlevels = two\n", "hierarchy.levels"),
    ("[quadrature]\nq = 2\n", "quadrature.q"),
    ("[quadrature]\nmethods = MC, RQMC\n", "quadrature.methods"),
    ("[qoi]\nquantities = velocity\n", "qoi.quantities"),
    ("[solver]\nstrategy = NEWTON\n", "solver.strategy"),
    ("[run]\nworkers = 0\n", "run.workers"),
    ("[hierarchy]\nh0 = 0.3\n", "hierarchy"),
    ("not an ini file", "<t>"),
])
def test_rejections(text, match):
    with pytest.raises(ConfigurationError, match=match):
        parse_config_text(text, "<t>")


def test_non_divisible_h0_names_the_extent():
    with pytest.raises(ConfigurationError) as info:
        parse_config_text("[hierarchy]\nh0 = 0.3\n", "<t>")
    assert "0.3" in str(info.value)


def test_unknown_override_key():
    with pytest.raises(ConfigurationError):
        default_config().with_overrides(solver={"nope": 1})


def test_round_trip_through_ini():
    cfg = parse_config_text("[hierarchy]\nlevels = 2\n[qoi]\nquantities = field; activation_time@0,0,0.25\n"
                            "[solver]\nnum_blocks = 3\n")
    again = parse_config_text(cfg.to_ini(), "<again>")
    assert again.values == cfg.values and again.digest() == cfg.digest()
    assert again.newton().block_steps is None and again.newton().num_blocks == 3
    assert cfg.digest("a") != cfg.digest("b")


def test_shipped_configs_parse():
    names = sorted(p.name for p in CONFIGS.glob("*.ini"))
    assert {"cube.ini", "corner.ini", "cube_smoke.ini"} <= set(names)
    for name in names:
        cfg = parse_config(CONFIGS / name)
        assert set(cfg.values) == set(SCHEMA)
    with pytest.raises(ConfigurationError, match="does not exist"):
        parse_config(CONFIGS / "missing.ini")
