import pytest

from gwainet.gradcheck import REGISTRY, run_gradcheck
from gwainet.tensor import ValidationError


def test_registry_covers_core_surfaces():
    expected = {"conv2d", "conv2d_input_grad", "conv2d_weight_grad",
                "fully_connected", "max_pool2d", "pixel_shuffle",
                "concat_depth", "bilinear_sample", "warp_image",
                "content_loss", "adversarial_loss", "identity_loss",
                "bce_loss", "gradient_penalty", "wnet", "gnet", "cnet",
                "inet", "siamese", "wnet_warp_l1"}
    assert expected <= set(REGISTRY)


def test_linear_op_is_nearly_exact():
    (report,) = run_gradcheck("concat_depth")
    assert report["max_rel_err"] < 1e-10


def test_bilinear_sample_at_jittered_points():
    (report,) = run_gradcheck("bilinear_sample")
    assert report["max_rel_err"] < 1e-4


def test_unknown_op_lists_registry():
    with pytest.raises(ValidationError, match="conv2d"):
        run_gradcheck("not_an_op")


def test_reports_carry_tolerance_and_verdict():
    (report,) = run_gradcheck("matmul", tol=1e-6)
    assert report["tol"] == 1e-6
    assert report["passed"] is (report["max_rel_err"] < 1e-6)
