"""End-to-end acceptance checks, one test per numbered criterion.

Each test prints a single verdict line `[criterion N] PASS: detail` when its
assertions hold, so the run log carries one pass/fail line per criterion.
The staged-training criteria (5 and 6) share one full pipeline run at the
default seed; everything else runs on throwaway micro models.
"""

import time
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from omnifuse.audio_frontend import AudioWave
from omnifuse.curation_pipeline import (
    CurationConfig,
    Manifest,
    make_mock_clients,
    make_synthetic_corpus,
    pipeline_report,
    run_pipeline,
)
from omnifuse.eval_metrics import ConfusionMatrix, rouge_l, uar, war, wer
from omnifuse.instruction_fusion import FusionWeights, fuse
from omnifuse.model import (
    ASPECT_LABELS,
    INSTRUCTION_FAMILIES,
    ModelDims,
    OmniModel,
    build_default_model,
)
from omnifuse.numerics import (
    Tensor,
    add,
    backward,
    concat_axis,
    cross_entropy,
    embed_lookup,
    finite_diff_grad,
    gelu,
    layer_norm,
    matmul,
    mean_pool_axis,
    mul,
    reshape,
    softmax_lastdim,
    sum_all,
    transpose,
)
from omnifuse.sequence_model import sequence_length
from omnifuse.training_stages import (
    FAMILIES,
    FREEZE_SCHEDULE,
    DataSpec,
    default_stage,
    evaluate,
    make_synthetic_dataset,
    render_clip,
    render_tone,
    run_pipeline_stage,
    run_stage,
    sample_directive,
    specialization_report,
)
from omnifuse.visual_branches import TokenGrid

MICRO = ModelDims(d_enc=6, d_model=8, d_t=8, d_h=8, max_len=256)

STAGES = ("branch_pretrain_face", "branch_pretrain_body",
          "branch_pretrain_interaction", "visual_finetune",
          "audio_align", "crossmodal")


def verdict(n: int, detail: str) -> None:
    print(f"[criterion {n}] PASS: {detail}")


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return np.max(np.abs(a - b) / denom)


# ----------------------------------------------------- criterion 1: grads

def _graph_loss(x: Tensor, aux: dict):
    h = matmul(x, aux["w"])
    h = add(h, aux["b"])
    h = gelu(h)
    h = layer_norm(h, aux["gain"], aux["bias"])
    picked = embed_lookup(h, aux["ids"])
    s = softmax_lastdim(h)
    pooled = mean_pool_axis(mul(s, h), 0)
    cat = concat_axis([picked, reshape(pooled, (1, pooled.shape[0]))], 0)
    ce = cross_entropy(cat, aux["targets"])
    tr = sum_all(transpose(matmul(cat, transpose(aux["w2"]))))
    return add(ce, mul(tr, 0.01))


def test_criterion_1_gradient_suite():
    start = time.monotonic()
    n_graphs = 200
    worst = 0.0
    for seed in range(n_graphs):
        rng = np.random.default_rng(seed)
        n, m, k = (int(rng.integers(2, 8)) for _ in range(3))
        aux = {
            "w": Tensor(rng.normal(size=(k, m))),
            "w2": Tensor(rng.normal(size=(2, m))),
            "b": Tensor(rng.normal(size=(m,))),
            "gain": Tensor(rng.normal(size=(m,)) * 0.5 + 1.0),
            "bias": Tensor(rng.normal(size=(m,)) * 0.1),
            "ids": rng.integers(0, n, size=1),
            "targets": rng.integers(0, m, size=2),
        }
        x = Tensor(rng.normal(size=(n, k)), requires_grad=True)
        backward(_graph_loss(x, aux))
        fd = finite_diff_grad(lambda t: _graph_loss(t, aux), x)
        err = rel_err(x.grad, fd)
        worst = max(worst, err)
        assert err <= 1e-4, f"graph seed {seed}: rel err {err:.2e}"

    # end-to-end loss through fuse and the softmax gating head
    model = build_default_model(seed=0, dims=MICRO)
    rng = np.random.default_rng(5)
    clip = render_clip({"face": 0, "body": 1, "interaction": 2}, rng, frames=2)
    wave = render_tone(1, rng)
    feat = model.featurize(clip, wave, INSTRUCTION_FAMILIES["face"][0],
                           answer_word=ASPECT_LABELS["face"][0])

    def loss():
        return model.sample_loss(feat, "<video_audio>")

    backward(loss())
    checked = 0
    for group in model.group_list():
        if group.frozen:
            continue
        # smallest tensor that actually took part in this sample's graph
        live = [t for t in group.params
                if t.grad is not None and t.data.size <= 120]
        if not live:
            continue
        tensor = min(live, key=lambda t: t.data.size)
        got = tensor.grad.copy()
        fd = finite_diff_grad(lambda t: loss(), tensor)
        err = rel_err(got, fd)
        worst = max(worst, err)
        assert err <= 1e-4, f"group {group.name}: rel err {err:.2e}"
        checked += 1
    assert checked >= 5

    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"
    verdict(1, f"{n_graphs} graphs + {checked} model groups, worst rel err "
               f"{worst:.2e}, {elapsed:.1f}s")


# --------------------------------------------- criterion 2: fusion algebra

def test_criterion_2_fusion_exactness_and_bounds():
    rng = np.random.default_rng(0)
    n_grids = 1000
    for i in range(n_grids):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                 int(rng.integers(1, 4)), int(rng.integers(2, 5)))
        f1, f2, f3 = (TokenGrid(Tensor(rng.normal(size=shape)))
                      for _ in range(3))
        one_hot = fuse(f1, f2, f3, FusionWeights(1.0, 0.0, 0.0))
        assert one_hot.tokens.data.tobytes() == f1.tokens.data.tobytes()

        z = rng.normal(size=3) * 3
        ez = np.exp(z - z.max())
        w = ez / ez.sum()
        fused = fuse(f1, f2, f3, FusionWeights(*w)).tokens.data
        stack = np.stack([f1.tokens.data, f2.tokens.data, f3.tokens.data])
        assert np.all(fused >= stack.min(axis=0) - 1e-12)
        assert np.all(fused <= stack.max(axis=0) + 1e-12)
    verdict(2, f"one-hot fusion bitwise equal and convex bounds on "
               f"{n_grids} random grids")


# ------------------------------------------------ criterion 3: audio chain

def test_criterion_3_audio_timing_chain():
    model = build_default_model(seed=0, dims=MICRO)
    rng = np.random.default_rng(1)

    def chain(n_samples):
        wave = AudioWave(rng.uniform(-0.5, 0.5, n_samples), 16000)
        frames = model.encode_audio_wave(wave)
        tokens = model.proj_audio(frames)
        t_mel = -(-n_samples // 160)
        return t_mel, frames.shape[0], tokens.tokens.shape[0]

    for _ in range(1000):
        s = int(rng.integers(1, 24000))
        t_mel, t_enc, t_a = chain(s)
        assert t_mel == -(-s // 160)
        assert t_enc == -(-t_mel // 2)
        assert t_a == -(-t_enc // 3)

    t_mel, t_enc, t_a = chain(30 * 16000)
    assert (t_mel, t_enc, t_a) == (3000, 1500, 500)
    verdict(3, "1000 random durations follow ceil(S/160) -> ceil(/2) -> "
               "ceil(/3); 30s gives 3000/1500/500")


# --------------------------------------------- criterion 4: freeze schedule

def test_criterion_4_freeze_schedule_bitwise():
    for stage_id in STAGES:
        families = FAMILIES
        if stage_id.startswith("branch_pretrain_"):
            families = (stage_id.rsplit("_", 1)[1],)
        stage = default_stage(
            stage_id, seed=0, steps=100, lr=1e-3,
            data=DataSpec(families=families, samples_per_family=3,
                          av_fraction=1.0 if stage_id in ("audio_align",
                                                          "crossmodal") else 0.0,
                          with_twins=stage_id == "crossmodal"),
            heldout_per_family=2)
        model = build_default_model(seed=0, dims=MICRO)
        before = {name: t.data.tobytes() for name, t in model.named_tensors()}
        run_stage(model, stage)
        trainable = FREEZE_SCHEDULE[stage_id]
        for group in model.group_list():
            changed = [name for name, t in model.named_tensors()
                       if name.startswith(group.name + "/")
                       and t.data.tobytes() != before[name]]
            if group.name in trainable:
                assert changed, f"{stage_id}: {group.name} never moved"
            else:
                assert not changed, f"{stage_id}: frozen {group.name} moved"
    verdict(4, "frozen groups bitwise stable and trainable groups moved "
               "across 100 steps in all 6 stages")


# ------------------------------------ criteria 5 and 6: the staged pipeline

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("acceptance_run")
    times, logs, models = {}, {}, {}
    for stage_id in STAGES:
        t0 = time.monotonic()
        model, log = run_pipeline_stage(stage_id, out_dir, seed=0)
        times[stage_id] = time.monotonic() - t0
        logs[stage_id], models[stage_id] = log, model
    return SimpleNamespace(out_dir=out_dir, times=times, logs=logs,
                           models=models)


def test_criterion_5_instruction_specialization(pipeline):
    visual = STAGES[:4]
    elapsed = sum(pipeline.times[s] for s in visual)
    assert elapsed < 600.0, f"visual stages took {elapsed:.0f}s"

    report = specialization_report(pipeline.models["visual_finetune"])
    for family in FAMILIES:
        assert report[family]["matches_branch"], (
            f"{family} weights {report[family]['mean_weights']}")
    heldout_acc = pipeline.logs["visual_finetune"].final_accuracy
    assert heldout_acc >= 0.9
    weights = {f: np.round(report[f]["mean_weights"], 2).tolist()
               for f in FAMILIES}
    verdict(5, f"weight argmax matches all 3 families {weights}, held-out "
               f"accuracy {heldout_acc:.2f}, visual stages {elapsed:.0f}s")


def test_criterion_6_modality_ordering(pipeline):
    model = pipeline.models["crossmodal"]
    stage = default_stage("crossmodal", seed=0)
    heldout = make_synthetic_dataset(
        replace(stage.data, samples_per_family=stage.heldout_per_family,
                with_twins=False), stage.seed + 7919)
    acc_av = evaluate(model, heldout)
    stripped = [replace(s, wave=None, has_audio=False) for s in heldout]
    acc_v = evaluate(model, stripped)
    chance = 1.0 / 3.0

    assert acc_av >= acc_v >= chance
    assert acc_av - acc_v >= 0.05
    verdict(6, f"accuracy AV {acc_av:.3f} >= V {acc_v:.3f} >= chance "
               f"{chance:.3f}, gap {100 * (acc_av - acc_v):.0f} points")


# ------------------------------------------------ criterion 7: metric oracles

def _edit_distance_table(ref, hyp):
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=int)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1,
                          d[i - 1, j - 1] + cost)
    return d[n, m]


def test_criterion_7_metric_oracles():
    rng = np.random.default_rng(7)
    vocab = [f"w{i}" for i in range(12)]
    for _ in range(1000):
        ref = [vocab[i] for i in rng.integers(0, 12, rng.integers(1, 15))]
        hyp = [vocab[i] for i in rng.integers(0, 12, rng.integers(0, 15))]
        expected = _edit_distance_table(ref, hyp) / len(ref)
        assert wer(" ".join(ref), " ".join(hyp)) == expected

    assert abs(uar(ConfusionMatrix(np.array([[2, 0], [1, 1]]))) - 0.75) <= 1e-9
    cm = ConfusionMatrix(np.array([[3, 0], [1, 1]]))
    assert abs(war(cm) - 0.8) <= 1e-9
    assert abs(uar(cm) - 0.75) <= 1e-9
    assert abs(uar(ConfusionMatrix(np.array([[0, 1], [1, 0]]))) - 0.0) <= 1e-9
    assert abs(wer("a b c d e", "a x c e") - 0.4) <= 1e-9
    assert abs(wer("a", "x y z") - 3.0) <= 1e-9
    beta = 1.2
    r, p = 3 / 4, 3 / 3
    expected_f = (1 + beta * beta) * r * p / (r + beta * beta * p)
    assert abs(rouge_l("a b c d", "a b d") - expected_f) <= 1e-9
    verdict(7, "WER equals brute-force DP on 1000 pairs; UAR/WAR/ROUGE-L "
               "hand examples within 1e-9")


# -------------------------------------------- criterion 8: curation goldens

def test_criterion_8_curation_determinism(tmp_path):
    def cold(name, stop_after="final"):
        records, store, expected = make_synthetic_corpus(seed=0)
        manifest = Manifest(records=records)
        path = tmp_path / name
        run_pipeline(manifest, CurationConfig(), make_mock_clients(seed=0),
                     store, stop_after=stop_after, save_path=path)
        return manifest, path, expected

    def file_bytes(path):
        return (path.read_bytes(),
                (path.parent / (path.name + ".meta.json")).read_bytes())

    manifest, golden_path, expected = cold("golden.jsonl")
    report = pipeline_report(manifest)
    for reason in ("low_res", "static", "hyperactive", "duplicate"):
        assert report["dropped"][reason] == expected[reason], reason
    assert report["kept"] == expected["kept"]

    _, second_path, _ = cold("second.jsonl")
    assert file_bytes(second_path) == file_bytes(golden_path)

    _, partial_path, _ = cold("partial.jsonl", stop_after="filter")
    resumed = Manifest.load(partial_path)
    _, fresh_store, _ = make_synthetic_corpus(seed=0)
    resumed_path = tmp_path / "resumed.jsonl"
    run_pipeline(resumed, CurationConfig(), make_mock_clients(seed=0),
                 fresh_store, save_path=resumed_path)
    assert file_bytes(resumed_path) == file_bytes(golden_path)
    verdict(8, f"golden manifest byte-identical across cold and resumed runs; "
               f"drop counts {dict(report['dropped'])}")


# ------------------------------------------ criterion 9: sequence assembly

def test_criterion_9_sequence_assembly():
    model = build_default_model(seed=0, dims=MICRO)
    rng = np.random.default_rng(9)
    from omnifuse.audio_frontend import AudioTokens
    from omnifuse.sequence_model import assemble

    p = model.special.placeholder_len
    for has_vision in (False, True):
        for has_audio in (False, True):
            for _ in range(25):
                t, h, w = (int(rng.integers(1, 4)) for _ in range(3))
                ta = int(rng.integers(1, 7))
                n_text = int(rng.integers(1, 6))
                vision = (TokenGrid(Tensor(rng.normal(size=(t, h, w, 8))))
                          if has_vision else None)
                audio = (AudioTokens(Tensor(rng.normal(size=(ta, 8))))
                         if has_audio else None)
                text_ids = rng.integers(2, 5, size=n_text)
                seq = assemble(text_ids, vision, audio, "<video_audio>",
                               model.decoder.embed, model.special)
                n_v = t * h * w if has_vision else None
                n_a = ta if has_audio else None
                expected = (1 + 2 + (n_v if has_vision else p)
                            + 2 + (n_a if has_audio else p) + n_text)
                assert len(seq) == expected
                assert sequence_length(n_v, n_a, n_text, p) == expected

    # audio-stripped twins: dropping the wave equals directing audio away
    spec = DataSpec(samples_per_family=34, av_fraction=1.0, with_twins=False)
    samples = make_synthetic_dataset(spec, seed=3)[:100]
    assert len(samples) == 100 and all(s.has_audio for s in samples)
    for sample in samples:
        feat_av = model.featurize(sample.clip, sample.wave,
                                  sample.instruction, sample.answer)
        feat_v = model.featurize(sample.clip, None,
                                 sample.instruction, sample.answer)
        seq_a = model.build_sequence(feat_av, "<video>", True)
        seq_b = model.build_sequence(feat_v, "<video>", True)
        assert seq_a.embeddings.data.tobytes() == seq_b.embeddings.data.tobytes()
        assert seq_a.source_tags == seq_b.source_tags
        loss_a = model.sample_loss(feat_av, "<video>").item()
        loss_b = model.sample_loss(feat_v, "<video>").item()
        assert loss_a == loss_b
    verdict(9, "length formula holds on the 4-case modality grid x 25 sizes; "
               "100 audio-stripped twins give identical sequences and losses")
