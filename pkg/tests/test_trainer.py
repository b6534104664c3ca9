"""Training loop: schedule, determinism, overfit sanity, checkpoint integrity."""

import numpy as np
import pytest
import torch

from prosotron import corpus, trainer
from prosotron.config import TrainConfig
from prosotron.errors import ContractError, NumericError
from prosotron.model import build_model

torch.set_num_threads(1)

TINY = dict(
    d_e=32,
    decoder_dim=32,
    attn_dim=16,
    speaker_dim=8,
    prenet_hidden=32,
    prenet_out=16,
    postnet_hidden=16,
    reference_stack="tiny",
    batch_size=4,
)

OVERFIT = dict(
    d_e=128,
    decoder_dim=128,
    attn_dim=64,
    speaker_dim=32,
    prenet_hidden=128,
    prenet_out=64,
    postnet_hidden=64,
    reference_stack="small",
    batch_size=1,
    # batch-1 memorization tolerates a hot lr; 2e-3 undershoots in 500 steps
    learning_rate=5e-3,
)


@pytest.fixture(scope="module")
def small_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainer_corpus")
    return corpus.make_corpus(root, n_utterances=4, n_speakers=2, seed=11,
                              min_frames=80, max_frames=112)


@pytest.fixture(scope="module")
def small_utterances(small_manifest):
    return corpus.load_manifest(small_manifest, n_speakers=2)


def single_batch(utterances, cfg):
    return trainer.batch_to_tensors(corpus.make_batch(utterances[: cfg.batch_size], cfg.r))


class TestSchedule:
    def test_decay_at_milestones(self):
        cfg = TrainConfig(learning_rate=1e-3, lr_decay_steps=(10, 20), lr_decay_factor=0.5)
        assert trainer.learning_rate_at(cfg, 1) == 1e-3
        assert trainer.learning_rate_at(cfg, 9) == 1e-3
        assert trainer.learning_rate_at(cfg, 10) == 5e-4
        assert trainer.learning_rate_at(cfg, 19) == 5e-4
        assert trainer.learning_rate_at(cfg, 20) == 2.5e-4
        assert trainer.learning_rate_at(cfg, 10_000) == 2.5e-4

    def test_zero_rate_freezes_parameters_and_loss(self, small_utterances):
        cfg = TrainConfig(variant="speech_side", learning_rate=0.0, seed=3, **TINY)
        torch.manual_seed(cfg.seed)
        model = build_model(cfg)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        tensors = single_batch(small_utterances, cfg)
        before = {k: v.clone() for k, v in model.named_parameters()}
        # dropout draws must match for the two losses to be comparable
        torch.manual_seed(99)
        first = trainer.train_step(model, opt, tensors, cfg, step=1)
        torch.manual_seed(99)
        second = trainer.train_step(model, opt, tensors, cfg, step=2)
        assert first == second
        for k, v in model.named_parameters():
            assert torch.equal(before[k], v), f"parameter {k} moved at lr 0"


class TestDeterminism:
    def test_fixed_seed_reproduces_metrics_and_checkpoint(self, small_manifest, tmp_path):
        cfg = TrainConfig(variant="speech_side", normalize=True, max_steps=6,
                          seed=5, **TINY)
        a = trainer.train(cfg, small_manifest, tmp_path / "a", log_every=2)
        b = trainer.train(cfg, small_manifest, tmp_path / "b", log_every=2)

        def stable_columns(path):
            lines = path.read_text().strip().split("\n")
            return [",".join(line.split(",")[:4]) for line in lines]

        assert stable_columns(a.metrics_path) == stable_columns(b.metrics_path)
        state_a = torch.load(a.checkpoint_path, weights_only=False)["model_state"]
        state_b = torch.load(b.checkpoint_path, weights_only=False)["model_state"]
        assert state_a.keys() == state_b.keys()
        for k in state_a:
            assert torch.equal(state_a[k], state_b[k]), f"{k} differs between seeded runs"

    def test_metrics_csv_layout(self, small_manifest, tmp_path):
        cfg = TrainConfig(variant="baseline", max_steps=5, seed=2, **TINY)
        result = trainer.train(cfg, small_manifest, tmp_path / "run", log_every=2)
        lines = result.metrics_path.read_text().strip().split("\n")
        assert lines[0] == trainer.METRICS_HEADER
        steps = [int(line.split(",")[0]) for line in lines[1:]]
        assert steps == [1, 2, 4, 5]
        for line in lines[1:]:
            fields = line.split(",")
            assert len(fields) == 5
            assert np.isfinite([float(x) for x in fields[1:]]).all()
        assert (tmp_path / "run" / "config.txt").exists()
        assert result.steps == 5


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    """One utterance memorized for 500 steps; reused by the fixed point test."""
    root = tmp_path_factory.mktemp("overfit_corpus")
    manifest = corpus.make_corpus(root, n_utterances=1, n_speakers=2, seed=21,
                                  min_frames=80, max_frames=96)
    utterances = corpus.load_manifest(manifest, n_speakers=2)
    cfg = TrainConfig(variant="speech_side", normalize=False, max_steps=500,
                      seed=1, **OVERFIT)
    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    tensors = single_batch(utterances, cfg)
    mel = lin = float("inf")
    for step in range(1, cfg.max_steps + 1):
        mel, lin = trainer.train_step(model, opt, tensors, cfg, step)
    return model, tensors, 0.5 * (mel + lin)


class TestOverfit:
    def test_single_utterance_memorized(self, overfit_run):
        _, _, final_loss = overfit_run
        assert final_loss < 0.05, f"final loss {final_loss:.4f}"

    def test_free_running_is_a_fixed_point_of_teacher_forcing(self, overfit_run):
        model, tensors, _ = overfit_run
        model.eval()
        ids = tensors["text_ids"][0]
        reference = tensors["mel"][:1]
        free = model.synthesize(ids, speaker_id=int(tensors["speaker_ids"][0]),
                                reference_mel=reference)
        target = free["mel"].unsqueeze(0)
        with torch.no_grad():
            forced = model(
                tensors["text_ids"][:1],
                tensors["text_mask"][:1],
                target,
                tensors["speaker_ids"][:1],
                reference_mel=reference,
            )
        mel_gap = (forced["mel"][0] - free["mel"]).abs().max()
        lin_gap = (forced["linear"][0] - free["linear"]).abs().max()
        assert float(mel_gap) < 1e-4, f"mel gap {float(mel_gap):.2e}"
        assert float(lin_gap) < 1e-4, f"linear gap {float(lin_gap):.2e}"


class TestCheckpoint:
    def make_model(self, variant="speech_side", normalize=True, seed=7):
        cfg = TrainConfig(variant=variant, normalize=normalize, seed=seed, **TINY)
        torch.manual_seed(cfg.seed)
        model = build_model(cfg)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        return cfg, model, opt

    def test_round_trip_is_lossless(self, tmp_path):
        cfg, model, opt = self.make_model()
        model.prosody_means.update(torch.rand(12, cfg.h), speaker_id=1)
        path = tmp_path / "ck.pt"
        trainer.save_checkpoint(path, model, opt, step=37, cfg=cfg)
        loaded, _, step, loaded_cfg = trainer.load_checkpoint(path, expected_cfg=cfg)
        assert step == 37
        assert loaded_cfg == cfg
        original = model.state_dict()
        restored = loaded.state_dict()
        assert original.keys() == restored.keys()
        for k in original:
            assert torch.equal(original[k], restored[k]), f"{k} not restored exactly"

    def test_variant_change_refused(self, tmp_path):
        cfg, model, opt = self.make_model(variant="speech_side")
        path = tmp_path / "ck.pt"
        trainer.save_checkpoint(path, model, opt, step=1, cfg=cfg)
        other = TrainConfig(variant="text_side", normalize=True, seed=7, **TINY)
        with pytest.raises(ContractError, match="different configuration"):
            trainer.load_checkpoint(path, expected_cfg=other)

    def test_tampered_config_text_refused(self, tmp_path):
        cfg, model, opt = self.make_model()
        path = tmp_path / "ck.pt"
        trainer.save_checkpoint(path, model, opt, step=1, cfg=cfg)
        blob = torch.load(path, weights_only=False)
        blob["config_text"] = blob["config_text"].replace("seed=7", "seed=8")
        torch.save(blob, path)
        with pytest.raises(ContractError, match="stored hash"):
            trainer.load_checkpoint(path)

    def test_missing_file_and_bad_version(self, tmp_path):
        with pytest.raises(ContractError, match="not found"):
            trainer.load_checkpoint(tmp_path / "absent.pt")
        cfg, model, opt = self.make_model()
        path = tmp_path / "ck.pt"
        trainer.save_checkpoint(path, model, opt, step=1, cfg=cfg)
        blob = torch.load(path, weights_only=False)
        blob["version"] = 999
        torch.save(blob, path)
        with pytest.raises(ContractError, match="version"):
            trainer.load_checkpoint(path)

    def test_speaker_means_survive_exactly(self, tmp_path):
        cfg, model, opt = self.make_model()
        model.prosody_means.update(torch.tensor([[0.5, 1.5]]), speaker_id=0)
        model.prosody_means.update(torch.tensor([[2.5, 3.5]]), speaker_id=0)
        model.prosody_means.update(torch.tensor([[4.0, 6.0]]), speaker_id=1)
        path = tmp_path / "ck.pt"
        trainer.save_checkpoint(path, model, opt, step=2, cfg=cfg)
        loaded, _, _, _ = trainer.load_checkpoint(path)
        assert torch.equal(loaded.prosody_means.means, model.prosody_means.means)
        assert torch.equal(loaded.prosody_means.counts, model.prosody_means.counts)
        assert loaded.prosody_means.means[0].tolist() == [1.5, 2.5]


class TestFailureHandling:
    def test_nan_loss_aborts_with_diagnostic_dump(self, small_manifest, tmp_path, monkeypatch):
        def poisoned(cfg):
            model = build_model(cfg)
            with torch.no_grad():
                model.decoder.out_proj.weight[0, 0] = float("nan")
            return model

        monkeypatch.setattr(trainer, "build_model", poisoned)
        cfg = TrainConfig(variant="baseline", max_steps=3, seed=0, **TINY)
        out = tmp_path / "run"
        with pytest.raises(NumericError, match="step 1"):
            trainer.train(cfg, small_manifest, out)
        assert (out / "dump-step1.pt").exists()
        assert (out / "metrics.csv").exists()

    def test_empty_manifest_rejected(self, tmp_path):
        manifest = tmp_path / "manifest.txt"
        manifest.write_text("")
        cfg = TrainConfig(variant="baseline", max_steps=1, **TINY)
        with pytest.raises(ContractError, match="empty"):
            trainer.train(cfg, manifest, tmp_path / "run")


class TestMeansBookkeeping:
    def test_training_accumulates_speaker_means(self, small_manifest, tmp_path):
        cfg = TrainConfig(variant="speech_side", normalize=True, max_steps=4,
                          seed=9, **TINY)
        result = trainer.train(cfg, small_manifest, tmp_path / "run")
        model, _, _, _ = trainer.load_checkpoint(result.checkpoint_path)
        assert int(model.prosody_means.counts.sum()) > 0
        assert torch.isfinite(model.prosody_means.means).all()

    def test_post_epoch_normalized_means_vanish(self, small_utterances):
        # frozen weights: after one accumulation epoch the stored mean equals the
        # average sample mean, so normalized embeddings average to zero per speaker
        cfg = TrainConfig(variant="speech_side", normalize=True, seed=13, **TINY)
        torch.manual_seed(cfg.seed)
        model = build_model(cfg)
        model.eval()
        per_speaker = {}
        with torch.no_grad():
            for utt in small_utterances:
                mel, _ = utt.features()
                frames = torch.from_numpy(mel).float().unsqueeze(0)
                trim = frames.shape[1] - frames.shape[1] % cfg.r
                embedding = model.extract_prosody(frames[:, :trim])[0]
                model.prosody_means.update(embedding, utt.speaker_id)
                per_speaker.setdefault(utt.speaker_id, []).append(embedding)
            raw_scale = float(model.prosody_means.means.abs().max())
            for speaker_id, embeddings in per_speaker.items():
                normalized = [
                    model.prosody_means.normalize(e, speaker_id).mean(dim=0)
                    for e in embeddings
                ]
                residual = torch.stack(normalized).mean(dim=0)
                assert float(residual.abs().max()) < 0.05 * raw_scale
