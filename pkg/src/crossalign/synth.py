"""Paired (audio-feature, caption) samples rendered from latent event scenes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import EOS, TokenDictionary
from .rng import SplitMix64

# (event name, caption phrase)
EVENTS: tuple[tuple[str, str], ...] = (
    ("bark", "a dog barks"),
    ("rain", "rain falls"),
    ("siren", "a siren wails"),
    ("speech", "a man speaks"),
    ("engine", "an engine hums"),
    ("birds", "birds chirp"),
    ("door", "a door slams"),
    ("water", "water flows"),
    ("baby", "a baby cries"),
    ("wind", "wind blows"),
    ("bell", "a bell rings"),
    ("crowd", "people cheer"),
)
NUM_EVENTS = len(EVENTS)
MAX_EVENTS = 3
CONNECTOR = "then"
PROMPT = ("describe", "the", "sound")
MAX_CAPTION_LEN = 3 * MAX_EVENTS + (MAX_EVENTS - 1) + 1
TEMPLATE_SEED = 0x7E3B1A5C0DDBA11
NOISE_STD = 0.05


def grammar_words() -> list[str]:
    words: list[str] = []
    for w in (*PROMPT, CONNECTOR, *(w for _, p in EVENTS for w in p.split())):
        if w not in words:
            words.append(w)
    return words


def build_dictionary(size: int = 64) -> TokenDictionary:
    """Specials, prompt and grammar words, then filler entries up to ``size``."""
    surfaces = ["<pad>", "<bos>", "<eos>", *grammar_words()]
    if size < len(surfaces):
        raise ValueError(f"dictionary size {size} cannot hold {len(surfaces)} grammar tokens")
    surfaces += [f"<unused{i}>" for i in range(len(surfaces), size)]
    return TokenDictionary(surfaces)


@dataclass(frozen=True)
class EventScene:
    events: tuple[int, ...]          # event type ids in onset order
    intensities: tuple[float, ...]
    seed: int


@dataclass
class SyntheticSample:
    h_a: np.ndarray
    caption: list[int]
    scene: EventScene


def gen_scene(seed: int) -> EventScene:
    rng = SplitMix64(seed).substream("scene")
    count = 1 + rng.randbelow(MAX_EVENTS)
    pool = list(range(NUM_EVENTS))
    events = []
    for i in range(count):
        j = i + rng.randbelow(NUM_EVENTS - i)
        pool[i], pool[j] = pool[j], pool[i]
        events.append(pool[i])
    intensities = tuple(0.5 + rng.uniform() for _ in events)
    return EventScene(tuple(events), intensities, seed)


def event_templates(dim: int) -> np.ndarray:
    """Frozen per-type feature vectors [NUM_EVENTS, dim]."""
    return SplitMix64(TEMPLATE_SEED).substream(f"templates/{dim}").normal((NUM_EVENTS, dim))


def span_bounds(n_tokens: int, n_events: int) -> list[tuple[int, int]]:
    edges = [(k * n_tokens) // n_events for k in range(n_events + 1)]
    return list(zip(edges[:-1], edges[1:]))


def render_audio_features(scene: EventScene, n_tokens: int, dim: int, noise: bool = True) -> np.ndarray:
    if n_tokens < len(scene.events):
        raise ValueError(f"{n_tokens} tokens cannot hold {len(scene.events)} events")
    templates = event_templates(dim)
    h = np.empty((n_tokens, dim))
    for (lo, hi), ev, amp in zip(span_bounds(n_tokens, len(scene.events)), scene.events, scene.intensities):
        h[lo:hi] = amp * templates[ev]
    if noise:
        h += SplitMix64(scene.seed).substream("noise").normal((n_tokens, dim), NOISE_STD)
    return h


def caption_words(scene: EventScene) -> list[str]:
    words: list[str] = []
    for k, ev in enumerate(scene.events):
        if k:
            words.append(CONNECTOR)
        words.extend(EVENTS[ev][1].split())
    return words


def render_caption(scene: EventScene, dictionary: TokenDictionary) -> list[int]:
    return dictionary.encode(caption_words(scene)) + [EOS]


def make_sample(seed: int, n_tokens: int, dim: int, dictionary: TokenDictionary,
                noise: bool = True) -> SyntheticSample:
    scene = gen_scene(seed)
    return SyntheticSample(render_audio_features(scene, n_tokens, dim, noise),
                           render_caption(scene, dictionary), scene)


def split_seeds(seed: int, split: str, size: int) -> list[int]:
    return [int(s) for s in SplitMix64(seed).substream("data").substream(split).u64(size)]


@dataclass
class Dataset:
    seeds: list[int]
    h_a: np.ndarray          # [S, N_a, D]
    captions: np.ndarray     # [S, MAX_CAPTION_LEN], PAD-filled
    scenes: list[EventScene]

    def __len__(self) -> int:
        return len(self.seeds)

    def manifest(self, dictionary: TokenDictionary) -> str:
        lines = []
        for s, cap in zip(self.seeds, self.captions):
            ids = [int(i) for i in cap if i != 0]
            lines.append(f"{s}\t{' '.join(dictionary.decode(ids))}\n")
        return "".join(lines)


def build_dataset(seed: int, split: str, size: int, n_tokens: int, dim: int,
                  dictionary: TokenDictionary, noise: bool = True) -> Dataset:
    seeds = split_seeds(seed, split, size)
    samples = [make_sample(s, n_tokens, dim, dictionary, noise) for s in seeds]
    caps = np.zeros((size, MAX_CAPTION_LEN), dtype=np.int64)
    for i, smp in enumerate(samples):
        caps[i, :len(smp.caption)] = smp.caption
    h = np.stack([smp.h_a for smp in samples]) if samples else np.zeros((0, n_tokens, dim))
    return Dataset(seeds, h, caps, [smp.scene for smp in samples])
