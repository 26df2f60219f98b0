"""One-off script to check every analytic gradient against central finite differences."""
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
from dotenv import load_dotenv

from modguard.schemas.models import LayerSpec
from modguard.shared.nn import build_model, feature_vjp, grads, one_hot
from modguard.shared.rejection import svm_input_gradient, svm_scores, svm_train

env_path = Path(__file__).parent.parent / ".env"
load_dotenv(env_path)

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)

H = 1e-3
REL_TOL = 1e-4


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def random_layers(rng: np.random.Generator, k: int):
    """conv relu flatten dense relu dense, with random widths."""
    layers = [
        LayerSpec(kind="conv", out=int(rng.integers(2, 5)), kh=int(rng.integers(1, 3)), kw=3),
        LayerSpec(kind="relu"),
        LayerSpec(kind="flatten"),
        LayerSpec(kind="dense", out=int(rng.integers(4, 9))),
        LayerSpec(kind="relu"),
        LayerSpec(kind="dense", out=k),
    ]
    return layers, 4


class GradientVerifier:
    """Compare reverse-mode gradients with finite differences on random small models."""

    def __init__(self, n_models: int = 20, seed: int = 0):
        self.n_models = n_models
        self.rng = np.random.default_rng(seed)

    def _model(self, i: int):
        k = int(self.rng.integers(2, 5))
        layers, feature_index = random_layers(self.rng, k)
        model = build_model(layers, 8, feature_index, seed=i, dtype=torch.float64)
        x = torch.from_numpy(self.rng.standard_normal((2, 2, 8)))
        target = one_hot(self.rng.integers(0, k, size=2), k, torch.float64)
        return model, x, target

    def verify_parameter_gradients(self, model, x, target) -> float:
        analytic = grads(model, x, target).d_params
        worst = 0.0
        with torch.no_grad():
            for p, g in zip(model.parameters(), analytic):
                flat = p.view(-1)
                picks = self.rng.choice(flat.numel(), size=min(5, flat.numel()), replace=False)
                numeric = []
                for j in picks:
                    saved = float(flat[j])
                    flat[j] = saved + H
                    up = grads(model, x, target, wrt_params=False).value
                    flat[j] = saved - H
                    down = grads(model, x, target, wrt_params=False).value
                    flat[j] = saved
                    numeric.append((up - down) / (2 * H))
                worst = max(worst, relative_error(g.view(-1)[picks].numpy(), np.array(numeric)))
        return worst

    def verify_input_gradient(self, model, x, target) -> float:
        analytic = grads(model, x, target, wrt_params=False).d_input.numpy()
        direction = self.rng.standard_normal(x.shape)
        up = grads(model, x + H * torch.from_numpy(direction), target, wrt_params=False).value
        down = grads(model, x - H * torch.from_numpy(direction), target, wrt_params=False).value
        return relative_error(np.sum(analytic * direction), (up - down) / (2 * H))

    def verify_feature_vjp(self, model, x) -> float:
        _, features = model(x)
        cotangent = torch.from_numpy(self.rng.standard_normal(tuple(features.shape)))
        analytic = feature_vjp(model, x, cotangent).numpy()
        direction = torch.from_numpy(self.rng.standard_normal(x.shape))
        with torch.no_grad():
            up = float(torch.sum(model(x + H * direction)[1] * cotangent))
            down = float(torch.sum(model(x - H * direction)[1] * cotangent))
        return relative_error(np.sum(analytic * direction.numpy()), (up - down) / (2 * H))

    def verify_svm_gradient(self) -> float:
        features = self.rng.standard_normal((60, 4))
        labels = np.repeat(np.arange(3), 20)
        svm = svm_train(features + labels[:, None], labels, gamma=0.5, C=1.0)
        zeta = self.rng.standard_normal(4)
        worst = 0.0
        for k in range(svm.num_classes):
            analytic = svm_input_gradient(svm, zeta, k)
            numeric = np.zeros(4)
            for j in range(4):
                step = np.zeros(4)
                step[j] = 1e-6
                numeric[j] = (svm_scores(svm, zeta + step)[k] - svm_scores(svm, zeta - step)[k]) / 2e-6
            worst = max(worst, relative_error(analytic, numeric))
        return worst

    def run_all_checks(self) -> dict:
        logger.info(f"Checking gradients on {self.n_models} random models...")
        start = time.time()
        worst = {"parameters": 0.0, "input": 0.0, "feature_vjp": 0.0}
        for i in range(self.n_models):
            model, x, target = self._model(i)
            worst["parameters"] = max(worst["parameters"], self.verify_parameter_gradients(model, x, target))
            worst["input"] = max(worst["input"], self.verify_input_gradient(model, x, target))
            worst["feature_vjp"] = max(worst["feature_vjp"], self.verify_feature_vjp(model, x))
        worst["svm_input"] = self.verify_svm_gradient()

        logger.info("\n=== GRADIENT CHECK SUMMARY ===")
        for name, err in worst.items():
            status = "ok" if err <= REL_TOL else "FAILED"
            logger.info(f"{name}: max relative error {err:.3e} ({status})")
        logger.info(f"Runtime: {time.time() - start:.1f}s")
        return worst


def main() -> int:
    """Main entry point."""
    worst = GradientVerifier().run_all_checks()
    return 0 if all(err <= REL_TOL for err in worst.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
