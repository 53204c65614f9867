"""End-to-end acceptance suite.

Fast property checks run on every invocation. The heavy artifacts (the
256-pair dataset, the fully trained checkpoint, the ablation checkpoints,
and the benchmark reports) are cached under ``MAKEUPDIFF_ACCEPT_CACHE``
(default ``.acceptance_cache/`` in the working directory) and rebuilt
deterministically from fixed seeds when missing. The first run takes on
the order of two hours on one CPU core; cached reruns take minutes.
"""

import json
import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import assert_grads_close, finite_difference_grads
from makeupdiff.ablation import ABLATION_SETTINGS, run_ablation
from makeupdiff.control import ControlEncoder, control_encode
from makeupdiff.data import DatasetManifest, build_dataset, load_pair
from makeupdiff.denoiser import (ConditionalUNet, DenoiserConditioning,
                                 DenoiserConfig, DualCrossAttention)
from makeupdiff.diffusion import (DiffusionSchedule, SamplerConfig, add_noise,
                                  ddim_step, encode_latent, training_loss)
from makeupdiff.encoder import (BackboneConfig, MakeupEncoder,
                                SelfAttentionMapper, assemble_embeddings,
                                image_to_tensor)
from makeupdiff.evaluate import (composite_score, face_color_distance,
                                 run_benchmark)
from makeupdiff.inference import transfer
from makeupdiff.metrics import l2m
from makeupdiff.model import (MakeupTransferModel, TransferConditioning,
                              load_checkpoint)
from makeupdiff.training import (TrainConfig, assemble_decoupled_batch,
                                 pretrain_base, save_base_weights, train)

CACHE = Path(os.environ.get("MAKEUPDIFF_ACCEPT_CACHE",
                            Path(__file__).resolve().parent.parent / ".acceptance_cache"))

N_PAIRS = 256
N_HOLDOUT = 32
IMAGE_SIZE = 64
DATA_SEED = 0
# The pretrained base is built once and shared: the adapter phase (the part
# the lesions vary) always starts from the same frozen U-Net, exactly as
# every fine-tune of a pretrained generator starts from the same base.
BASE_CKPT = CACHE / "base.pt"
FULL_CFG = TrainConfig(learning_rate=5e-5, batch_size=16, iterations=2000, seed=0,
                       base_checkpoint=str(BASE_CKPT))
SAMPLER = SamplerConfig(steps=30, guidance_scale=1.5, seed=0)


def _cached_json(name, fn):
    path = CACHE / name
    if path.exists():
        return json.loads(path.read_text())
    value = fn()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(value, indent=1))
    return value


@pytest.fixture(scope="session")
def accept_dataset():
    root = CACHE / "dataset"
    if (root / "manifest.json").exists():
        return DatasetManifest.load(root)
    root.mkdir(parents=True, exist_ok=True)
    return build_dataset(N_PAIRS, IMAGE_SIZE, DATA_SEED, root)


@pytest.fixture(scope="session")
def split(accept_dataset):
    train_man = DatasetManifest(accept_dataset.root,
                                accept_dataset.entries[:N_PAIRS - N_HOLDOUT],
                                accept_dataset.seed)
    holdout = list(range(N_PAIRS - N_HOLDOUT, N_PAIRS))
    return train_man, holdout


@pytest.fixture(scope="session")
def sched():
    return DiffusionSchedule.linear(FULL_CFG.schedule_steps)


@pytest.fixture(scope="session")
def base_ckpt(split, sched):
    if not BASE_CKPT.exists():
        import dataclasses
        train_man, _ = split
        CACHE.mkdir(parents=True, exist_ok=True)
        cfg = dataclasses.replace(FULL_CFG, base_checkpoint=None)
        torch.manual_seed(cfg.seed)
        model = MakeupTransferModel(DenoiserConfig(),
                                    BackboneConfig(image_size=IMAGE_SIZE),
                                    seed=cfg.seed)
        pretrain_base(model, split[0], cfg, sched)
        save_base_weights(model, BASE_CKPT)
    return BASE_CKPT


@pytest.fixture(scope="session")
def full_model(split, base_ckpt):
    ckpt = CACHE / "full.pt"
    if not ckpt.exists():
        train_man, _ = split
        CACHE.mkdir(parents=True, exist_ok=True)
        train(train_man, FULL_CFG, ckpt, log=None)
    model, _ = load_checkpoint(ckpt)
    return model


@pytest.fixture(scope="session")
def full_report(full_model, accept_dataset, split, sched):
    def run():
        _, holdout = split
        rep = run_benchmark(full_model, accept_dataset, holdout, SAMPLER, sched,
                            with_attention=True)
        return {"aggregate": rep.aggregate, "config": rep.config}

    return _cached_json("reports/full.json", run)


class TestZeroInitTransparency:
    """Criterion 1: untrained pipeline equals the bare base, bitwise."""

    def test_full_pipeline_matches_base_on_16_inputs(self):
        model = MakeupTransferModel(DenoiserConfig(), BackboneConfig(), seed=11)
        gen = torch.Generator().manual_seed(0)
        for _ in range(16):
            x = torch.randn(1, 3, 32, 32, generator=gen)
            t = torch.randint(0, 100, (1,), generator=gen)
            content = torch.rand(1, 3, 64, 64, generator=gen)
            structure = torch.rand(1, 3, 64, 64, generator=gen)
            makeup = torch.rand(1, 3, 64, 64, generator=gen)
            cond = TransferConditioning(content, structure,
                                        model.encode_makeup(makeup))
            with torch.no_grad():
                full = model(x, t, cond)
                base = model.unet(x, t, DenoiserConditioning(model.unet.empty_text(1)))
            assert torch.equal(full, base)


class TestShapeLaw:
    """Criterion 2: makeup token count is (P*P+1)*K at every scale."""

    def test_full_scale_3084_tokens_dim_1024(self):
        cfg = BackboneConfig(patch_grid=16, embed_dim=1024, n_layers=12,
                             n_tap=12, n_heads=16, image_size=224)
        assert cfg.tokens_per_layer == 257
        assert cfg.total_tokens == 257 * 12 == 3084
        layers = [torch.randn(1, 257, 1024) for _ in range(12)]
        raw = assemble_embeddings(layers)
        assert raw.shape == (1, 3084, 1024)
        mapper = SelfAttentionMapper(1024, heads=16, seed=0)
        with torch.no_grad():
            out = mapper(raw)
        assert out.shape == (1, 3084, 1024)

    def test_five_random_toy_configs(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            p = int(rng.integers(2, 5))
            k = int(rng.integers(1, 4))
            d = int(rng.choice([8, 16, 32]))
            cfg = BackboneConfig(patch_grid=p, embed_dim=d, n_layers=k + 1,
                                 n_tap=k, n_heads=2, image_size=4 * p)
            enc = MakeupEncoder(cfg, seed=0)
            img = torch.rand(2, 3, 4 * p, 4 * p)
            with torch.no_grad():
                tokens = enc(img)
            assert tokens.shape == (2, (p * p + 1) * k, d)


class TestGradients:
    """Criterion 3: finite-difference gradchecks in double precision."""

    def test_mapper(self):
        torch.manual_seed(0)
        mapper = SelfAttentionMapper(8, heads=2, seed=0).double()
        raw = torch.randn(1, 6, 8, dtype=torch.float64)
        target = torch.randn(1, 6, 8, dtype=torch.float64)
        params = [mapper.to_q.weight, mapper.to_v.weight, mapper.to_out.weight]

        def loss_fn():
            return ((mapper(raw) - target) ** 2).mean()

        assert_grads_close(finite_difference_grads(loss_fn, params), rtol=1e-4)

    def test_makeup_cross_attention(self):
        torch.manual_seed(1)
        attn = DualCrossAttention(4, 4, 4, heads=2).double()
        with torch.no_grad():
            attn.to_out_m.weight.normal_(0, 0.3)
        x = torch.randn(1, 3, 4, dtype=torch.float64)
        text = torch.randn(1, 2, 4, dtype=torch.float64)
        makeup = torch.randn(1, 5, 4, dtype=torch.float64)
        target = torch.randn(1, 3, 4, dtype=torch.float64)
        params = [attn.to_q.weight, attn.to_k_m.weight, attn.to_v_m.weight,
                  attn.to_out_m.weight]

        def loss_fn():
            return ((attn(x, text, makeup) - target) ** 2).mean()

        assert_grads_close(finite_difference_grads(loss_fn, params), rtol=1e-4)

    def test_control_encoder_tap(self):
        base = ConditionalUNet(DenoiserConfig(base_width=8, n_heads=2, text_dim=8,
                                              makeup_dim=8), seed=0).double()
        torch.manual_seed(2)
        ctrl = ControlEncoder(base).double()
        with torch.no_grad():
            for g in ctrl.gates:
                g.weight.normal_(0, 0.1)
        cimg = torch.randn(1, 3, 16, 16, dtype=torch.float64)
        x = torch.randn(1, 3, 8, 8, dtype=torch.float64)
        temb = base.time_embedding(torch.tensor([5]), torch.float64)
        text = base.empty_text(1, dtype=torch.float64)
        params = [ctrl.gates[0].weight, ctrl.conv_in.weight,
                  ctrl.hint.stack[0].weight]

        def loss_fn():
            return sum((r ** 2).mean() for r in ctrl(cimg, x, temb, text))

        assert_grads_close(finite_difference_grads(loss_fn, params), rtol=1e-4)

    def test_full_toy_training_loss(self):
        dcfg = DenoiserConfig(base_width=8, n_heads=2, text_dim=8, makeup_dim=8,
                              attention_levels=(0, 1))
        bcfg = BackboneConfig(patch_grid=2, embed_dim=8, n_layers=2, n_tap=2,
                              n_heads=2, image_size=16)
        model = MakeupTransferModel(dcfg, bcfg, seed=0).double()
        torch.manual_seed(3)
        with torch.no_grad():  # non-trivial adapter weights so grads are non-zero
            for name, p in model.named_parameters():
                group = model._group_of(name)
                if group in ("unet.makeup_attn", "control.content",
                             "control.structure"):
                    p.normal_(0, 0.05)
        sched = DiffusionSchedule.linear(20)
        content = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        structure = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        makeup_img = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        x0 = encode_latent(torch.rand(1, 3, 16, 16, dtype=torch.float64))
        params = [model.dp_encoder.mapper.to_out.weight,
                  model.content_ctrl.gates[0].weight,
                  model.unet.attention_blocks()[0].to_k_m.weight]

        def loss_fn():
            tokens = model.encode_makeup(makeup_img)
            cond = TransferConditioning(content, structure, tokens)
            gen = torch.Generator().manual_seed(5)
            return training_loss(x0, cond, sched, model, generator=gen)

        assert_grads_close(finite_difference_grads(loss_fn, params), rtol=1e-4)


class TestOracles:
    """Criterion 4: closed-form oracles at stated tolerances."""

    def test_makeup_attention_brute_force_1e6(self):
        torch.manual_seed(4)
        attn = DualCrossAttention(4, 4, 4, heads=1).double()
        for p in attn.parameters():
            torch.nn.init.normal_(p, std=0.5)
        x = torch.randn(1, 2, 4, dtype=torch.float64)
        text = torch.randn(1, 2, 4, dtype=torch.float64)
        makeup = torch.randn(1, 3, 4, dtype=torch.float64)
        with torch.no_grad():
            got = attn(x, text, makeup)
            q = x @ attn.to_q.weight.T

            def dense(kp, vp, op, tokens):
                k = tokens @ kp.weight.T
                v = tokens @ vp.weight.T
                w = torch.exp(q @ k.transpose(-1, -2) / math.sqrt(4))
                w = w / w.sum(dim=-1, keepdim=True)
                return (w @ v) @ op.weight.T + op.bias

            expect = dense(attn.to_k_t, attn.to_v_t, attn.to_out_t, text) + \
                attn.makeup_gain * dense(attn.to_k_m, attn.to_v_m, attn.to_out_m, makeup)
        assert torch.allclose(got, expect, atol=1e-6)

    def test_add_noise_elementwise_1e7(self, sched):
        torch.manual_seed(5)
        x0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        eps = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        t = torch.tensor([13, 77])
        out = add_noise(x0, eps, t, sched)
        for b in range(2):
            a = sched.alphas_cumprod[t[b]]
            for idx in np.ndindex(3, 4, 4):
                expect = math.sqrt(a) * x0[(b, *idx)].item() + \
                    math.sqrt(1 - a) * eps[(b, *idx)].item()
                assert abs(out[(b, *idx)].item() - expect) < 1e-7

    def test_l2m_elementwise_1e7(self):
        rng = np.random.default_rng(6)
        a, b = rng.random((5, 5, 3)), rng.random((5, 5, 3))
        mask = (rng.random((5, 5)) > 0.6).astype(np.uint8)
        total, n = 0.0, 0
        for y in range(5):
            for x in range(5):
                if mask[y, x] == 0:
                    for c in range(3):
                        total += ((a[y, x, c] - b[y, x, c]) * 255.0) ** 2
                        n += 1
        assert abs(l2m(a, b, mask) - total / n) < 1e-7

    def test_one_step_ddim_recovers_x0_1e5(self, sched):
        torch.manual_seed(7)
        x0 = torch.randn(1, 3, 8, 8, dtype=torch.float64)
        eps = torch.randn(1, 3, 8, 8, dtype=torch.float64)
        for t in (0, 40, 99):
            x_t = add_noise(x0, eps, torch.tensor([t]), sched)
            back = ddim_step(x_t, eps, t, None, sched)
            assert torch.allclose(back, x0, atol=1e-5)


class TestCompositingDecoupling:
    """Criterion 5: bitwise compositing and provenance over 64 pairs."""

    def test_64_pairs(self, tmp_path):
        manifest = build_dataset(64, IMAGE_SIZE, 17, tmp_path)
        cfg = TrainConfig()
        for i in range(64):
            pair = load_pair(manifest, i)
            bg = pair.source.face_mask == 0
            assert np.array_equal(pair.source.image[bg], pair.target_image[bg])
            item = assemble_decoupled_batch(pair, cfg, seed=1000 + i)
            assert item.content_provenance == "source"
            assert item.structure_provenance == "target"
            assert item.makeup_provenance == "augmented-target"
            assert np.square(item.makeup_input - item.reconstruction_target).sum() > 0


class TestEndToEnd:
    """Criterion 6: the measured desk-scale experiment."""

    def test_transfer_ratio_at_most_half(self, full_report):
        agg = full_report["aggregate"]
        ratio = agg["face_color_out_vs_ref"] / agg["face_color_src_vs_ref"]
        assert ratio <= 0.5, f"transfer ratio {ratio:.3f} > 0.5"

    def test_background_l2m_at_most_10(self, full_report):
        assert full_report["aggregate"]["l2m"] <= 10.0, full_report["aggregate"]["l2m"]

    def test_ssim_at_least_06(self, full_report):
        assert full_report["aggregate"]["ssim"] >= 0.6, full_report["aggregate"]["ssim"]


class TestGuidanceMonotonicity:
    """Criterion 7: makeup strength grows with the guidance scale."""

    def test_median_shift_nondecreasing(self, full_model, accept_dataset, split, sched):
        def run():
            _, holdout = split
            medians = []
            for gs in (0.0, 1.0, 1.5, 2.0):
                shifts = []
                for j, i in enumerate(holdout):
                    pair = load_pair(accept_dataset, i)
                    out = transfer(full_model, pair.source.image,
                                   pair.source.keypoints, pair.target_image,
                                   SamplerConfig(steps=30, guidance_scale=gs,
                                                 seed=SAMPLER.seed + j), sched)
                    shifts.append(face_color_distance(out, pair.source.image,
                                                      pair.source.face_mask))
                medians.append(float(np.median(shifts)))
            return medians

        medians = _cached_json("reports/gs_sweep.json", run)
        inversions = 0
        for lo, hi in zip(medians, medians[1:]):
            if hi < lo:
                inversions += 1
                assert (lo - hi) <= 0.05 * lo, f"inversion too large: {medians}"
        assert inversions <= 1, f"more than one inversion: {medians}"


class TestAblationOrdering:
    """Criterion 8: the full configuration beats every lesion."""

    @pytest.fixture(scope="class")
    def scores(self, full_model, full_report, accept_dataset, split, sched):
        def run():
            _, holdout = split
            out = {}
            agg = full_report["aggregate"]
            out["full"] = agg["face_color_out_vs_ref"] / agg["face_color_src_vs_ref"] \
                + agg["l2m"]
            for setting in ABLATION_SETTINGS:
                rep = run_ablation(setting, accept_dataset, holdout, FULL_CFG,
                                   SAMPLER, CACHE / "ablations",
                                   full_checkpoint=CACHE / "full.pt")
                out[setting] = composite_score(rep)
            return out

        return _cached_json("reports/ablations.json", run)

    @pytest.mark.parametrize("setting", ABLATION_SETTINGS)
    def test_full_beats_lesion(self, scores, setting):
        assert scores["full"] < scores[setting], \
            f"full {scores['full']:.3f} vs {setting} {scores[setting]:.3f}"


class TestAttentionLocalization:
    """Criterion 9: attention mass concentrates on the makeup face."""

    def test_face_beats_background_on_70_percent(self, full_report):
        frac = full_report["config"]["attention_face_gt_bg_frac"]
        assert frac >= 0.70, f"face > background on only {frac:.0%} of pairs"


class TestDeterminism:
    """Criterion 10: fixed-seed transfer is byte-identical."""

    def test_cli_transfer_twice_byte_identical(self, full_model, accept_dataset,
                                               split, tmp_path):
        _, holdout = split
        entry = accept_dataset.entries[holdout[0]]
        src = accept_dataset.root / entry[1]
        tgt = accept_dataset.root / entry[2]
        kp = accept_dataset.root / entry[3]
        outs = []
        for name in ("a.png", "b.png"):
            res = subprocess.run(
                [sys.executable, "-m", "makeupdiff.cli",
                 "--out", str(tmp_path / name), "transfer",
                 "--source", str(src), "--makeup", str(tgt),
                 "--checkpoint", str(CACHE / "full.pt"),
                 "--keypoints", str(kp), "--steps", "30", "--gs", "1.5"],
                capture_output=True, text=True)
            assert res.returncode == 0, res.stderr
            outs.append((tmp_path / name).read_bytes())
        assert outs[0] == outs[1]
