"""Human-centric clip curation: scene splitting, keyframe screening,
resolution gating, semantic dedup, multi-caption consensus, and box
attachment, orchestrated over a persisted manifest.

External model calls (captioning, embedding, summarizing, detection) go
through pluggable clients. Deterministic mocks make the whole pipeline a
pure function of (corpus, config, seed); HTTP clients share the same
interface for real deployments.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import time
from dataclasses import dataclass, field, asdict

import numpy as np

DROP_REASONS = ("low_res", "static", "hyperactive", "duplicate", "client_error")
_STATUS_RE = re.compile(r"^(raw|split|kept|dropped\((%s)\))$" % "|".join(DROP_REASONS))
BOX_KINDS = ("person", "face")
STAGE_ORDER = ("start", "split", "filter", "dedup", "final")


class ClientError(RuntimeError):
    """A model client failed after exhausting its retries."""


# ------------------------------------------------------------------- records

@dataclass
class ClipRecord:
    id: str
    source: str
    resolution: tuple          # (W, H)
    frame_count: int
    fps: float
    brief_caption: str = None
    detailed_captions: list = field(default_factory=list)
    final_caption: str = None
    boxes: list = field(default_factory=list)   # (frame_idx, kind, x, y, w, h)
    status: str = "raw"

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)
        if len(self.resolution) != 2 or min(self.resolution) <= 0:
            raise ValueError(f"{self.id}: bad resolution {self.resolution}")
        if self.frame_count <= 0 or self.fps <= 0:
            raise ValueError(f"{self.id}: bad frame_count/fps")
        if not _STATUS_RE.match(self.status):
            raise ValueError(f"{self.id}: bad status {self.status!r}")
        self.boxes = [self._check_box(b) for b in self.boxes]

    def _check_box(self, box):
        frame_idx, kind, x, y, w, h = box
        frame_idx, x, y, w, h = int(frame_idx), int(x), int(y), int(w), int(h)
        if kind not in BOX_KINDS:
            raise ValueError(f"{self.id}: bad box kind {kind!r}")
        if not 0 <= frame_idx < self.frame_count:
            raise ValueError(f"{self.id}: box frame {frame_idx} out of range")
        wd, ht = self.resolution
        if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > wd or y + h > ht:
            raise ValueError(f"{self.id}: box {box} outside {self.resolution}")
        return (frame_idx, kind, x, y, w, h)

    @property
    def dropped(self) -> bool:
        return self.status.startswith("dropped(")

    @property
    def drop_reason(self):
        return self.status[8:-1] if self.dropped else None

    def drop(self, reason: str) -> None:
        if reason not in DROP_REASONS:
            raise ValueError(f"unknown drop reason {reason!r}")
        self.status = f"dropped({reason})"

    def to_json(self) -> str:
        d = {"id": self.id, "source": self.source,
             "resolution": list(self.resolution), "frame_count": self.frame_count,
             "fps": self.fps, "brief_caption": self.brief_caption,
             "detailed_captions": self.detailed_captions,
             "final_caption": self.final_caption,
             "boxes": [list(b) for b in self.boxes], "status": self.status}
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "ClipRecord":
        d = json.loads(line)
        d["boxes"] = [tuple(b) for b in d.get("boxes", [])]
        return cls(**d)


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    watermark: str = "start"
    config_hash: str = None

    def __post_init__(self):
        if self.watermark not in STAGE_ORDER:
            raise ValueError(f"unknown watermark {self.watermark!r}")
        ids = [r.id for r in self.records]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate record ids in manifest")

    def by_id(self, clip_id: str) -> ClipRecord:
        for r in self.records:
            if r.id == clip_id:
                return r
        raise KeyError(clip_id)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for r in self.records:
                f.write(r.to_json() + "\n")
        meta = {"watermark": self.watermark, "config_hash": self.config_hash}
        with open(str(path) + ".meta.json", "w", encoding="utf-8") as f:
            f.write(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Manifest":
        try:
            with open(path, encoding="utf-8") as f:
                records = [ClipRecord.from_json(line)
                           for line in f if line.strip()]
        except (OSError, json.JSONDecodeError, TypeError, KeyError) as e:
            raise ValueError(f"unreadable manifest {path}: {e}") from e
        meta_path = str(path) + ".meta.json"
        watermark, config_hash = "start", None
        if os.path.exists(meta_path):
            try:
                with open(meta_path, encoding="utf-8") as f:
                    meta = json.load(f)
                watermark = meta.get("watermark", "start")
                config_hash = meta.get("config_hash")
            except (OSError, json.JSONDecodeError) as e:
                raise ValueError(f"unreadable manifest meta {meta_path}: {e}") from e
        return cls(records=records, watermark=watermark, config_hash=config_hash)


# -------------------------------------------------------------------- config

@dataclass
class CurationConfig:
    tau_scene: float = 0.5
    min_scene_len: int = 8
    tau_key: float = 0.15
    min_keyframes: int = 2
    max_keyframe_rate: float = 5.0     # keyframes per second
    min_height: int = 480
    tau_sim: float = 0.9
    seed: int = 0


def config_hash(config) -> str:
    payload = asdict(config) if not isinstance(config, dict) else dict(config)
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# --------------------------------------------------------------- frame logic

def _gray_small(frames: np.ndarray) -> np.ndarray:
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim == 4:
        f = f.mean(axis=3)
    if f.ndim != 3:
        raise ValueError(f"frames must be (T,H,W[,C]), got {f.shape}")
    sh, sw = max(1, f.shape[1] // 16), max(1, f.shape[2] // 16)
    return f[:, ::sh, ::sw]


def _frame_diffs(frames: np.ndarray) -> np.ndarray:
    g = _gray_small(frames)
    if g.shape[0] < 2:
        return np.zeros(0)
    return np.abs(np.diff(g, axis=0)).mean(axis=(1, 2))


def detect_scenes(frames, tau_scene: float, min_len: int = 1) -> list:
    """Boundaries where downsampled grayscale jumps; short segments merge
    into the preceding one, so boundaries partition [0, T) exactly.

    A raw segment keeps its left boundary only if it is itself at least
    min_len frames; otherwise it dissolves into the segment before it
    (frame-by-frame flicker therefore collapses to a single clip).
    """
    if not 0.0 < tau_scene < 1.0:
        raise ValueError("tau_scene must be in (0,1)")
    diffs = _frame_diffs(frames)
    if diffs.size == 0:
        return []
    t = diffs.size + 1
    raw = [i for i, d in enumerate(diffs, start=1) if d > tau_scene]
    edges = [0] + raw + [t]
    return [edges[k] for k in range(1, len(edges) - 1)
            if edges[k + 1] - edges[k] >= min_len]


def count_keyframes(frames, tau_key: float) -> int:
    """First frame plus every local difference peak above the threshold."""
    diffs = _frame_diffs(frames)
    count = 1
    for i, d in enumerate(diffs):
        left = diffs[i - 1] if i > 0 else -np.inf
        right = diffs[i + 1] if i + 1 < diffs.size else -np.inf
        if d > tau_key and d > left and d >= right:
            count += 1
    return count


@dataclass
class FilterRules:
    min_height: int = 480
    min_keyframes: int = 2
    max_keyframe_rate: float = 5.0


def filter_clip(rec: ClipRecord, rules: FilterRules, keyframes: int) -> str:
    """Resolution gate, then static, then hyperactive; returns new status."""
    if rec.resolution[1] < rules.min_height:
        rec.drop("low_res")
    elif keyframes < rules.min_keyframes:
        rec.drop("static")
    elif keyframes / (rec.frame_count / rec.fps) > rules.max_keyframe_rate:
        rec.drop("hyperactive")
    else:
        rec.status = "kept"
    return rec.status


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    # bitwise-equal embeddings are exact duplicates; avoids 1.0-epsilon noise
    if np.array_equal(a, b):
        return 1.0
    return float(np.dot(a, b))


def dedup(records, embed, tau_sim: float) -> set:
    """Greedy in id order: keep iff max cosine to kept records < tau_sim."""
    if not 0.0 < tau_sim <= 1.0:
        raise ValueError("tau_sim must be in (0,1]")
    for r in records:
        if not r.brief_caption:
            raise ValueError(f"{r.id}: dedup needs a brief caption")
    kept_ids = set()
    kept_vecs = []
    for r in sorted(records, key=lambda r: r.id):
        vec = embed(r.brief_caption)
        if all(cosine(vec, v) < tau_sim for v in kept_vecs):
            kept_ids.add(r.id)
            kept_vecs.append(vec)
    return kept_ids


def consensus_caption(detailed, summarizer) -> str:
    if len(detailed) < 2:
        raise ValueError("consensus needs at least 2 captions")
    return summarizer(list(detailed))


# ------------------------------------------------------------------- clients

def _sentences(text: str) -> list:
    return [s.strip() for s in text.split(".") if s.strip()]


def _jaccard(a: str, b: str) -> float:
    sa, sb = set(a.lower().split()), set(b.lower().split())
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


class MockCaptionerClient:
    """Caption from coarse content statistics plus a content-hash anchor.

    Identical frames always caption identically (so dedup sees them), while
    distinct clips differ in at least the anchor words. Detail mode appends
    a model-specific sentence standing in for a hallucination.
    """

    def __init__(self, seed: int = 0, detail: bool = False):
        self.seed = seed
        self.detail = detail

    def __call__(self, frames) -> str:
        f = np.asarray(frames, dtype=np.float64)
        tone = "bright" if f.mean() > 0.5 else "dim"
        diffs = _frame_diffs(f)
        pace = "brisk" if diffs.size and diffs.mean() > 0.1 else "calm"
        digest = hashlib.sha256(np.round(f, 6).tobytes()).hexdigest()
        anchor = " ".join(digest[i:i + 4] for i in range(0, 16, 4))
        core = f"a {tone} scene with {pace} motion anchor {anchor}"
        if not self.detail:
            return core
        extra_word = hashlib.sha256(f"{self.seed}:{digest}".encode()).hexdigest()[:6]
        return f"{core}. model {self.seed} noticed {extra_word}."


class MockEmbedderClient:
    """Hashed bag-of-words, unit-normalized."""

    def __init__(self, seed: int = 0, dim: int = 256):
        self.seed = seed
        self.dim = dim

    def __call__(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for word in text.lower().split():
            h = hashlib.sha256(f"{self.seed}:{word}".encode()).digest()
            vec[int.from_bytes(h[:4], "little") % self.dim] += 1.0
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise ClientError("cannot embed empty text")
        return vec / norm


class MockSummarizerClient:
    """Keeps first-caption sentences that have a Jaccard >= 0.8 match in
    every other caption; the shared core survives, hallucinations do not."""

    def __init__(self, tau_agree: float = 0.8):
        self.tau_agree = tau_agree

    def __call__(self, captions) -> str:
        first = _sentences(captions[0])
        others = [_sentences(c) for c in captions[1:]]
        kept = [s for s in first
                if all(any(_jaccard(s, o) >= self.tau_agree for o in sents)
                       for sents in others)]
        return ". ".join(kept) + "." if kept else ""


class MockDetectorClient:
    """Person box = bright-pixel bounding box of the middle frame (scaled to
    the declared resolution); face box = upper-center third of the person."""

    def __init__(self, threshold: float = 0.5):
        self.threshold = threshold

    def __call__(self, frames, resolution) -> list:
        f = np.asarray(frames, dtype=np.float64)
        if f.ndim == 4:
            f = f.mean(axis=3)
        mid = f.shape[0] // 2
        ys, xs = np.nonzero(f[mid] > self.threshold)
        if ys.size == 0:
            return []
        h_arr, w_arr = f.shape[1], f.shape[2]
        wd, ht = resolution
        x0 = int(xs.min() * wd / w_arr)
        x1 = min(wd, int((xs.max() + 1) * wd / w_arr) + 1)
        y0 = int(ys.min() * ht / h_arr)
        y1 = min(ht, int((ys.max() + 1) * ht / h_arr) + 1)
        person = (mid, "person", x0, y0, max(1, x1 - x0), max(1, y1 - y0))
        fw = max(1, (x1 - x0) // 3)
        fh = max(1, (y1 - y0) // 3)
        face = (mid, "face", x0 + (x1 - x0 - fw) // 2, y0, fw, fh)
        return [person, face]


@dataclass
class ClientSet:
    brief_captioner: object
    detailed_captioners: tuple
    embedder: object
    summarizer: object
    detector: object

    def __post_init__(self):
        if len(self.detailed_captioners) < 2:
            raise ValueError("need at least 2 detailed captioners for consensus")


def make_mock_clients(seed: int = 0) -> ClientSet:
    return ClientSet(
        brief_captioner=MockCaptionerClient(seed=seed),
        detailed_captioners=(MockCaptionerClient(seed=seed + 1, detail=True),
                             MockCaptionerClient(seed=seed + 2, detail=True)),
        embedder=MockEmbedderClient(seed=seed),
        summarizer=MockSummarizerClient(),
        detector=MockDetectorClient(),
    )


# ------------------------------------------------------------- http clients

def _requests_transport(url, payload, timeout):
    import requests

    resp = requests.post(url, json=payload, timeout=timeout)
    resp.raise_for_status()
    return resp.json()


class HttpModelClient:
    """JSON-over-HTTP client: configurable timeout, retries with exponential
    backoff. `transport`/`sleep` are injectable for tests."""

    def __init__(self, base_url: str, endpoint: str, timeout: float = 30.0,
                 retries: int = 2, transport=None, sleep=time.sleep):
        self.url = base_url.rstrip("/") + endpoint
        self.timeout = timeout
        self.retries = retries
        self.transport = transport or _requests_transport
        self.sleep = sleep

    def _call(self, payload: dict) -> dict:
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                self.sleep(0.5 * 2 ** (attempt - 1))
            try:
                return self.transport(self.url, payload, self.timeout)
            except Exception as e:       # noqa: BLE001 - every failure retries
                last = e
        raise ClientError(f"{self.url}: failed after {self.retries + 1} "
                          f"attempts: {last}") from last


class HttpCaptionerClient(HttpModelClient):
    def __init__(self, base_url, **kw):
        super().__init__(base_url, "/caption", **kw)

    def __call__(self, frames) -> str:
        f = np.asarray(frames, dtype=np.float64)
        payload = {"shape": list(f.shape), "frames": f.tolist()}
        return str(self._call(payload)["caption"])


class HttpEmbedderClient(HttpModelClient):
    def __init__(self, base_url, **kw):
        super().__init__(base_url, "/embed", **kw)

    def __call__(self, text: str) -> np.ndarray:
        vec = np.asarray(self._call({"text": text})["vector"], dtype=np.float64)
        norm = np.linalg.norm(vec)
        if norm == 0 or not np.all(np.isfinite(vec)):
            raise ClientError("embedder returned a degenerate vector")
        return vec / norm


class HttpSummarizerClient(HttpModelClient):
    def __init__(self, base_url, **kw):
        super().__init__(base_url, "/summarize", **kw)

    def __call__(self, captions) -> str:
        return str(self._call({"captions": list(captions)})["caption"])


class HttpDetectorClient(HttpModelClient):
    def __init__(self, base_url, **kw):
        super().__init__(base_url, "/detect", **kw)

    def __call__(self, frames, resolution) -> list:
        f = np.asarray(frames, dtype=np.float64)
        payload = {"shape": list(f.shape), "frames": f.tolist(),
                   "resolution": list(resolution)}
        return [tuple(b) for b in self._call(payload)["boxes"]]


def make_http_clients(base_url: str, timeout: float = 30.0,
                      retries: int = 2) -> ClientSet:
    kw = dict(timeout=timeout, retries=retries)
    return ClientSet(
        brief_captioner=HttpCaptionerClient(base_url, **kw),
        detailed_captioners=(HttpCaptionerClient(base_url, **kw),
                             HttpCaptionerClient(base_url, **kw)),
        embedder=HttpEmbedderClient(base_url, **kw),
        summarizer=HttpSummarizerClient(base_url, **kw),
        detector=HttpDetectorClient(base_url, **kw),
    )


# ------------------------------------------------------------------ pipeline

_CHILD_RE = re.compile(r"^(?P<base>.+)#(?P<a>\d+):(?P<b>\d+)$")


def resolve_frames(record: ClipRecord, frame_store) -> np.ndarray:
    """Child sources carry `parent#a:b` ranges so resumes never depend on
    state materialized during an earlier run."""
    m = _CHILD_RE.match(record.source)
    if m:
        return np.asarray(frame_store[m.group("base")])[
            int(m.group("a")):int(m.group("b"))]
    return np.asarray(frame_store[record.source])


def _stage_split(manifest, config, frame_store):
    for rec in list(manifest.records):
        if rec.status != "raw" or "#" in rec.source:
            continue
        frames = resolve_frames(rec, frame_store)
        bounds = detect_scenes(frames, config.tau_scene, config.min_scene_len)
        if not bounds:
            continue
        edges = [0] + bounds + [rec.frame_count]
        rec.status = "split"
        for k in range(len(edges) - 1):
            a, b = edges[k], edges[k + 1]
            manifest.records.append(ClipRecord(
                id=f"{rec.id}/s{k:02d}", source=f"{rec.source}#{a}:{b}",
                resolution=rec.resolution, frame_count=b - a, fps=rec.fps))


def _stage_filter(manifest, config, frame_store):
    rules = FilterRules(config.min_height, config.min_keyframes,
                        config.max_keyframe_rate)
    for rec in manifest.records:
        if rec.status != "raw":
            continue
        keyframes = count_keyframes(resolve_frames(rec, frame_store),
                                    config.tau_key)
        filter_clip(rec, rules, keyframes)


def _stage_dedup(manifest, config, clients, frame_store):
    captioned = []
    for rec in manifest.records:
        if rec.status != "kept":
            continue
        try:
            rec.brief_caption = clients.brief_captioner(
                resolve_frames(rec, frame_store))
            captioned.append(rec)
        except ClientError:
            rec.drop("client_error")
    if not captioned:
        return
    try:
        kept_ids = dedup(captioned, clients.embedder, config.tau_sim)
    except ClientError:
        for rec in captioned:
            rec.drop("client_error")
        return
    for rec in captioned:
        if rec.id not in kept_ids:
            rec.drop("duplicate")


def _stage_final(manifest, config, clients, frame_store):
    for rec in manifest.records:
        if rec.status != "kept":
            continue
        try:
            frames = resolve_frames(rec, frame_store)
            rec.detailed_captions = [c(frames)
                                     for c in clients.detailed_captioners]
            rec.final_caption = consensus_caption(rec.detailed_captions,
                                                  clients.summarizer)
            rec.boxes = [rec._check_box(b)
                         for b in clients.detector(frames, rec.resolution)]
        except ClientError:
            rec.drop("client_error")


_STAGE_FUNCS = {
    "split": lambda m, c, cl, fs: _stage_split(m, c, fs),
    "filter": lambda m, c, cl, fs: _stage_filter(m, c, fs),
    "dedup": _stage_dedup,
    "final": _stage_final,
}


def run_pipeline(manifest: Manifest, config: CurationConfig, clients: ClientSet,
                 frame_store, stop_after: str = "final",
                 save_path=None) -> Manifest:
    """Run stages after the manifest's watermark up to `stop_after`.

    Each completed stage advances the watermark (and persists when a path is
    given), so an interrupted run resumes to an identical final manifest.
    """
    if stop_after not in STAGE_ORDER[1:]:
        raise ValueError(f"unknown stage {stop_after!r}")
    expected = config_hash(config)
    if manifest.config_hash is not None and manifest.config_hash != expected:
        raise ValueError("config hash mismatch: manifest was produced by a "
                         "different configuration")
    manifest.config_hash = expected

    start = STAGE_ORDER.index(manifest.watermark)
    stop = STAGE_ORDER.index(stop_after)
    for stage in STAGE_ORDER[start + 1:stop + 1]:
        _STAGE_FUNCS[stage](manifest, config, clients, frame_store)
        manifest.watermark = stage
        if save_path is not None:
            manifest.save(save_path)
    return manifest


def pipeline_report(manifest: Manifest) -> dict:
    reasons = {r: 0 for r in DROP_REASONS}
    kept = split = raw = 0
    review = []
    for rec in manifest.records:
        if rec.dropped:
            reasons[rec.drop_reason] += 1
        elif rec.status == "kept":
            kept += 1
            if rec.final_caption == "":
                review.append(rec.id)
        elif rec.status == "split":
            split += 1
        else:
            raw += 1
    return {"total": len(manifest.records), "kept": kept,
            "split_parents": split, "raw": raw, "dropped": reasons,
            "review": review}


# ----------------------------------------------------------- bundled corpus

def make_synthetic_corpus(seed: int = 0):
    """50-clip corpus with a known defect plan.

    Returns (records, frame_store, expected), where expected maps each drop
    reason to the count the filter stages must produce, plus structural
    counts (children, kept).
    """
    rng = np.random.default_rng(seed)
    plan = (["low_res"] * 6 + ["static"] * 5 + ["hyper"] * 5 +
            ["multiscene"] * 6 + ["dup"] * 8 + ["normal"] * 20)
    order = rng.permutation(len(plan))
    records, frame_store = [], {}
    h, w = 48, 64
    dup_content = None

    def noise(t):
        return rng.uniform(0.0, 0.02, (t, h, w))

    def normal_frames(t=40):
        f = np.full((t, h, w), 0.3) + noise(t)
        r0, c0 = int(rng.integers(8, 28)), int(rng.integers(8, 44))
        f[:, r0:r0 + 10, c0:c0 + 12] = 0.8       # a bright subject for boxes
        f[13:] += 0.25                            # two keyframe steps
        f[27:] -= 0.25
        return np.clip(f, 0.0, 1.0)

    for slot, kind in zip(order, plan):
        clip_id = f"clip-{slot:02d}"
        resolution, fps = (1280, 720), 10.0
        if kind == "low_res":
            frames = normal_frames()
            resolution = (640, 360)
        elif kind == "static":
            frames = np.full((30, h, w), 0.4)
        elif kind == "hyper":
            t = 30
            fps = 30.0
            amps = rng.uniform(0.55, 0.9, t)
            frames = np.empty((t, h, w))
            for i in range(t):
                frames[i] = amps[i] if i % 2 else 0.05
            frames += noise(t)
            frames = np.clip(frames, 0.0, 1.0)
        elif kind == "multiscene":
            t = 44
            f = np.empty((t, h, w))
            f[:22] = 0.15
            f[11:22] += 0.25
            f[22:] = 0.95
            f[33:] -= 0.25
            frames = np.clip(f + noise(t), 0.0, 1.0)
        elif kind == "dup":
            if dup_content is None:
                dup_content = normal_frames()
                frames = dup_content
            else:
                frames = dup_content.copy()
                dup_content = None
        else:
            frames = normal_frames()
        frame_store[clip_id] = frames
        records.append(ClipRecord(id=clip_id, source=clip_id,
                                  resolution=resolution,
                                  frame_count=frames.shape[0], fps=fps))

    records.sort(key=lambda r: r.id)
    expected = {"low_res": 6, "static": 5, "hyperactive": 5, "duplicate": 4,
                "client_error": 0, "split_parents": 6, "children": 12,
                "kept": 36, "total": 62}
    return records, frame_store, expected
