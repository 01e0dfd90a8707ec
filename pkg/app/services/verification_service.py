"""Oracle suites behind the ``verify`` command and run replay."""

import copy
import shutil
import tempfile
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from ..core.errors import VerificationError
from ..core.seeding import derive_seed, numpy_rng, seeded_torch, torch_generator
from ..core.storage import hash_payload, read_model, write_csv, write_json
from ..models.schemas import (
    CPDVariant,
    LayerKind,
    LayerSpec,
    PruningConfig,
    RunManifest,
    Variant,
    VerifyRunConfig,
)
from .cpd_models import ConjugateModel, DirichletCategorical, DirichletMultinomial, NormalInverseWishart
from .cpd_service import cpd_service
from .numkernel import conv_block, numkernel
from .quantizer import Codebook
from .vq_model import VQModel
from .vq_service import vq_service
import logging

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
ORACLE_TOLERANCE = 1e-9
ORACLE_LAMBDAS = (10.0, 1e3)
EMA_TOLERANCE = 1e-3


def _linear(in_features: int, out_features: int) -> List[LayerSpec]:
    return [LayerSpec(kind=LayerKind.LINEAR, in_features=in_features, out_features=out_features)]


def _grad_cases() -> Dict[str, Tuple[Callable[[], torch.nn.Module], Tuple[int, ...], Optional[Tuple[str, Tuple[int, ...]]]]]:
    """name -> (module factory, input shape, optional (loss, output shape))"""
    return {
        "linear": (lambda: numkernel.build_stack(_linear(6, 3)), (4, 6), None),
        "conv_block": (lambda: numkernel.build_stack(conv_block(2, 3)), (4, 2, 6), None),
        "deconv_block": (lambda: numkernel.build_stack(conv_block(3, 2, last=True, deconv=True)), (3, 3, 5), None),
        "pool_dropout": (
            lambda: numkernel.build_stack(
                [
                    LayerSpec(kind=LayerKind.CONV1D, in_channels=2, out_channels=3),
                    LayerSpec(kind=LayerKind.RELU),
                    LayerSpec(kind=LayerKind.MAXPOOL1D),
                    LayerSpec(kind=LayerKind.DROPOUT, p=0.25),
                ]
            ),
            (3, 2, 8),
            None,
        ),
        "three_layer_stack": (
            lambda: numkernel.build_stack(conv_block(2, 3) + conv_block(3, 2, last=True, deconv=True) + _linear(10, 3)),
            (3, 2, 5),
            None,
        ),
        "masked_mse": (lambda: numkernel.build_stack(_linear(5, 5)), (4, 5), ("masked_mse", (4, 5))),
        "weighted_bce": (lambda: numkernel.build_stack(_linear(5, 5)), (4, 5), ("weighted_bce", (4, 5))),
        "cross_entropy": (lambda: numkernel.build_stack(_linear(6, 3)), (8, 6), ("cross_entropy", (8, 3))),
    }


class VerificationService:
    # ------------------------------------------------------------------
    # Gradient fidelity
    # ------------------------------------------------------------------

    def _objective(self, kind: str, shape: Tuple[int, ...], generator: torch.Generator):
        if kind == "masked_mse":
            target = torch.randn(shape, generator=generator, dtype=torch.float64)
            mask = torch.randint(0, 3, shape, generator=generator)
            return lambda out: numkernel.masked_mse(out, target, mask).value
        if kind == "weighted_bce":
            target = torch.randint(0, 2, shape, generator=generator).double()
            mask = torch.randint(0, 2, shape, generator=generator)
            return lambda out: numkernel.weighted_bce_logits(out, target, mask).value
        labels = torch.randint(0, 3, (shape[0],), generator=generator)
        return lambda out: numkernel.cross_entropy(out, labels).value

    def grad_suite(self, n_seeds: int, seed: int) -> pd.DataFrame:
        rows = []
        for name, (factory, shape, loss) in _grad_cases().items():
            for s in range(n_seeds):
                case_seed = derive_seed(seed, f"verify.grad.{name}.{s}")
                with seeded_torch(case_seed):
                    module = factory()
                generator = torch_generator(case_seed)
                x = torch.randn(shape, generator=generator, dtype=torch.float64)
                objective = self._objective(loss[0], loss[1], generator) if loss else None
                report = numkernel.grad_check(module, x, GRAD_TOLERANCE, seed=s, objective=objective)
                rows.append({"case": name, "seed": s, "max_rel_err": report.max_rel_err, "passed": report.passed})
        return pd.DataFrame(rows)

    # ------------------------------------------------------------------
    # Change-point oracle
    # ------------------------------------------------------------------

    def random_instance(self, variant: CPDVariant, seed: int, length: int) -> Tuple[np.ndarray, ConjugateModel]:
        rng = numpy_rng(seed)
        if variant == CPDVariant.HIERARCHICAL:
            return rng.integers(0, 4, size=length), DirichletCategorical(4, alpha=1.0)
        if variant == CPDVariant.MULTINOMIAL:
            probs = rng.dirichlet(np.ones(4), size=length)
            return np.stack([rng.multinomial(5, p) for p in probs]).astype(float), DirichletMultinomial(4, samples=5)
        shift = np.where(np.arange(length) < length // 2, 0.0, 2.0)[:, None]
        data = rng.normal(size=(length, 3)) + shift
        return data, NormalInverseWishart(3, mu0=data[: min(7, length)].mean(axis=0))

    def oracle_suite(self, n_sequences: int, length: int, seed: int) -> pd.DataFrame:
        unpruned = PruningConfig(enabled=False)
        rows = []
        for variant in CPDVariant:
            for i in range(n_sequences):
                observations, model = self.random_instance(variant, derive_seed(seed, f"verify.oracle.{variant.value}.{i}"), length)
                for lam in ORACLE_LAMBDAS:
                    recursive = cpd_service.run(observations, copy.deepcopy(model), lam, unpruned).to_dense()
                    exact = cpd_service.brute_force_oracle(observations, copy.deepcopy(model), lam)
                    error = float(np.max(np.abs(recursive - exact)))
                    rows.append(
                        {"variant": variant.value, "sequence": i, "lambda": lam, "max_abs_err": error, "passed": error <= ORACLE_TOLERANCE}
                    )
        return pd.DataFrame(rows)

    # ------------------------------------------------------------------
    # Quantizer
    # ------------------------------------------------------------------

    def quantizer_suite(self, n_queries: int, codebook_sizes: List[int], seed: int, dim: int = 8) -> pd.DataFrame:
        rows = []
        for size in codebook_sizes:
            generator = torch_generator(derive_seed(seed, f"verify.quantizer.{size}"))
            codebook = Codebook(size, dim)
            codebook.embeddings.copy_(torch.randn(size, dim, generator=generator))
            codewords = codebook.embeddings.double().numpy()
            mismatches = 0
            for start in range(0, n_queries, 1024):
                n = min(1024, n_queries - start)
                queries = torch.randn(1, dim, n, generator=generator, dtype=torch.float64)
                found = codebook.quantize(queries).indices.reshape(-1).numpy()
                flat = queries[0].t().numpy()
                squared = ((flat[:, None, :] - codewords[None]) ** 2).sum(-1)
                expected = np.argmin(squared, axis=1)
                rows_idx = np.arange(n)
                # equal distances are not a disagreement
                differ = (found != expected) & ~np.isclose(squared[rows_idx, found], squared[rows_idx, expected], rtol=0, atol=1e-12)
                mismatches += int(differ.sum())
            rows.append({"codebook_size": size, "queries": n_queries, "mismatches": mismatches, "passed": mismatches == 0})
        return pd.DataFrame(rows)

    def ema_suite(self, seed: int, steps: int = 200, decay: float = 0.99) -> Dict[str, Any]:
        generator = torch_generator(derive_seed(seed, "verify.ema"))
        codebook = Codebook(8, 3)
        codebook.embeddings.copy_(torch.randn(8, 3, generator=generator) * 5)
        point = torch.randn(3, generator=generator)
        batch = point.repeat(16, 1)
        for _ in range(steps):
            codebook.ema_update(batch, torch.zeros(16, dtype=torch.long), decay=decay)
        error = float(torch.linalg.vector_norm(codebook.embeddings[0] - point))
        return {"steps": steps, "decay": decay, "error": error, "passed": error < EMA_TOLERANCE}

    # ------------------------------------------------------------------
    # Zero-imputation invariance
    # ------------------------------------------------------------------

    def imputation_suite(self, seed: int, n_features: int = 4, length: int = 12) -> pd.DataFrame:
        rows = []
        generator = torch_generator(derive_seed(seed, "verify.imputation"))
        x = torch.randn(2, n_features, length, generator=generator)
        mask = torch.randint(0, 3, (2, n_features, length), generator=generator)
        perturbed = torch.where(mask == 1, x, x + 10.0 * torch.randn(x.shape, generator=generator))
        binary = [False] * n_features
        for variant in Variant:
            with seeded_torch(derive_seed(seed, f"verify.imputation.{variant.value}")):
                model = VQModel(variant, n_features, embedding_dim=8 * n_features, codebook_size=8)
            results = []
            for values in (x, perturbed):
                replica = copy.deepcopy(model).train()
                loss = vq_service.loss_terms(replica(values, mask), values, mask, binary, beta=0.25)
                grads = numkernel.backward(numkernel.attach(loss.total, replica))
                results.append((float(loss.total), grads))
            (loss_a, grads_a), (loss_b, grads_b) = results
            identical = loss_a == loss_b and all(torch.equal(grads_a[k], grads_b[k]) for k in grads_a)
            rows.append({"variant": variant.value, "loss": loss_a, "passed": identical})
        return pd.DataFrame(rows)

    # ------------------------------------------------------------------
    # Entry points
    # ------------------------------------------------------------------

    def run_suites(self, config: VerifyRunConfig, output: Path, seed: int) -> Dict[str, Any]:
        """Run every oracle suite, write per-suite tables and fail when any check fails"""
        tables = {
            "grad_checks": self.grad_suite(config.grad_seeds, seed),
            "oracle": self.oracle_suite(config.oracle_sequences, config.oracle_length, seed),
            "quantizer": self.quantizer_suite(config.quantizer_queries, config.codebook_sizes, seed),
            "imputation": self.imputation_suite(seed),
        }
        ema = self.ema_suite(seed)
        for name, table in tables.items():
            write_csv(output / f"{name}.csv", table)
        write_json(output / "ema.json", ema)

        passed = {name: bool(table["passed"].all()) for name, table in tables.items()}
        passed["ema"] = bool(ema["passed"])
        metrics = {
            "passed": passed,
            "max_grad_rel_err": float(tables["grad_checks"]["max_rel_err"].max()),
            "max_oracle_abs_err": float(tables["oracle"]["max_abs_err"].max()),
            "quantizer_mismatches": int(tables["quantizer"]["mismatches"].sum()),
            "ema_error": ema["error"],
        }
        write_json(output / "report.json", metrics)
        failed = sorted(name for name, ok in passed.items() if not ok)
        if failed:
            logger.error(f"Verification failed: {', '.join(failed)}")
            raise VerificationError("Verification suites failed", suites=failed)
        logger.info("All verification suites passed")
        return metrics

    def replay(self, directory: Path, output: Path) -> Dict[str, Any]:
        """Re-execute a recorded run on copies of its inputs and compare metric hashes"""
        from .pipeline_service import pipeline_service

        directory = Path(directory)
        manifest = read_model(directory / "manifest.json", RunManifest)
        command = pipeline_service.command(manifest.command)
        root = directory.parent
        with tempfile.TemporaryDirectory(prefix="vqp-replay-") as scratch:
            for relative in manifest.input_hashes:
                source, target = root / relative, Path(scratch) / relative
                if source.is_dir():
                    shutil.copytree(source, target, dirs_exist_ok=True)
                else:
                    target.parent.mkdir(parents=True, exist_ok=True)
                    shutil.copy2(source, target)
            config = command.config_model.model_validate({**manifest.config, "workdir": scratch})
            replayed = pipeline_service.execute(manifest.command, config)

        expected, got = hash_payload(manifest.metrics), hash_payload(replayed.metrics)
        differing = sorted(
            name for name, digest in manifest.output_hashes.items() if replayed.output_hashes.get(name) != digest
        )
        result = {
            "command": manifest.command,
            "expected_metrics_hash": expected,
            "replayed_metrics_hash": got,
            "metrics_match": expected == got,
            "differing_outputs": differing,
        }
        write_json(output / "replay.json", result)
        if expected != got:
            logger.error(f"Replay of {directory} produced different metrics")
            raise VerificationError("Replayed metrics differ from the manifest", directory=str(directory))
        if differing:
            logger.warning(f"Replay reproduced the metrics but {len(differing)} output files differ")
        return result


# Global verification service instance
verification_service = VerificationService()
