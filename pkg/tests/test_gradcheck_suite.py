import unittest

from src.core.gradcheck_suite import (
    END_TO_END_PARAMS,
    MODEL_TOLERANCE,
    OP_TOLERANCE,
    GradCheckResult,
    end_to_end_check,
    run_suite,
)


class TestGradCheckSuite(unittest.TestCase):

    def test_every_op_passes(self):
        results = run_suite(seed=0, include_model=False)
        failed = [(r.name, r.max_rel_error) for r in results if not r.passed]
        self.assertEqual(failed, [])
        names = {r.name for r in results}
        for expected in ("softmax", "layer_norm", "conv2d_weight", "window_mhsa_input", "relative_bias_table",
                         "swin_block_padded_shifted", "up_merging", "focal_loss", "reg_l1_loss"):
            self.assertIn(expected, names)
        self.assertTrue(all(r.tolerance == OP_TOLERANCE for r in results))

    def test_other_seed_passes(self):
        results = run_suite(seed=3, include_model=False)
        self.assertTrue(all(r.passed for r in results), [r for r in results if not r.passed])

    def test_only_filter(self):
        results = run_suite(include_model=False, only="conv2d")
        self.assertEqual([r.name for r in results], ["conv2d_input", "conv2d_weight", "conv2d_patchify"])

    def test_end_to_end_loss_gradients(self):
        results = end_to_end_check(seed=0, max_elements=3)
        self.assertEqual([r.name for r in results], [f"model:{n}" for n in END_TO_END_PARAMS])
        for r in results:
            self.assertLess(r.max_rel_error, MODEL_TOLERANCE, r.name)

    def test_non_finite_error_fails(self):
        self.assertFalse(GradCheckResult("x", float("nan"), 1e-4).passed)
        self.assertFalse(GradCheckResult("x", 2e-4, 1e-4).passed)
        self.assertTrue(GradCheckResult("x", 5e-5, 1e-4).passed)


if __name__ == "__main__":
    unittest.main()
