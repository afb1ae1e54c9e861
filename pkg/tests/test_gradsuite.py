import pytest

from vidmatte import gradsuite


def test_registry_covers_every_scope():
    names = {s: [t.name for t in gradsuite.targets(s)] for s in gradsuite.SCOPES}
    assert "matmul" in names["op"] and "conv2d_s2" in names["op"]
    assert {"deformable_attention", "sftm", "fpn", "lqtm", "focal_loss"} <= set(names["module"])
    assert names["model"] == ["model", "model_dense"]
    with pytest.raises(ValueError):
        gradsuite.targets("everything")


def test_op_targets_meet_smooth_tolerance():
    for t in gradsuite.targets("op"):
        assert t.tol <= 1e-4
        if t.name != "bilinear_sample":
            assert t.tol == gradsuite.SMOOTH_TOL


def test_check_is_deterministic():
    t = gradsuite.targets("module")[0]
    assert gradsuite.check_target(t, 3) == gradsuite.check_target(t, 3)


@pytest.mark.parametrize("scope", ["op", "module"])
def test_suite_passes_on_two_seeds(scope):
    results = gradsuite.run_suite(scope, seeds=range(2))
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]
    assert all(r.line().endswith("ok") for r in results)
