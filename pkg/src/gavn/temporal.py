"""Inter-frame temporal module: predeblur pyramid, deformable alignment chains
and attention fusion.

Frame offsets inside a window are expressed relative to the centre frame
``t``: a window of ``2N+5`` frames covers offsets ``-(N+2) .. N+2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn as nn

from gavn.diffops import Conv, DeformConv, leaky, sigmoid, upsample_offsets

ATTENTION_TARGETS = ("aligned", "per_branch")
BRANCHES = ("FS", "FA", "AF", "BA", "BS")  # concat order of the fusion conv


@dataclass(frozen=True)
class WindowLayout:
    N: int = 1

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")

    @property
    def inputs(self) -> range:
        return range(-(self.N + 2), self.N + 3)

    @property
    def chain(self) -> range:
        return range(-(self.N + 1), self.N + 2)

    @property
    def outputs(self) -> range:
        return range(-self.N, self.N + 1)

    @property
    def n_inputs(self) -> int:
        return 2 * self.N + 5

    @property
    def n_outputs(self) -> int:
        return 2 * self.N + 1

    def index(self, j: int) -> int:
        """Position of offset ``j`` inside the input window."""
        return j + self.N + 2


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]  # full, 1/2, 1/4 resolution

    @property
    def feature(self) -> torch.Tensor:
        return self.levels[-1]


@dataclass
class AlignedFeatureSet:
    FA: object
    BA: object
    FS: object
    BS: object
    AF: object
    absent: frozenset = field(default_factory=frozenset)

    def get(self, name: str):
        return getattr(self, name)


@dataclass
class ChainResult:
    """Every alignment computed for one window, keyed by frame offset."""

    FA: dict = field(default_factory=dict)
    BA: dict = field(default_factory=dict)
    FS: dict = field(default_factory=dict)
    BS: dict = field(default_factory=dict)
    AF: dict = field(default_factory=dict)
    absent: set = field(default_factory=set)  # (branch, j) pairs needing frames outside the window

    def feature_set(self, j: int) -> AlignedFeatureSet:
        """Branches for output frame ``j``; absent skip branches fall back to AF."""
        af = self.AF[j]
        missing = set()
        entries = {}
        for name in ("FA", "BA", "FS", "BS"):
            d = getattr(self, name)
            if j in d:
                entries[name] = d[j]
            else:
                entries[name] = af
                missing.add(name)
        return AlignedFeatureSet(AF=af, absent=frozenset(missing), **entries)


def chain_plan(layout: WindowLayout) -> tuple[dict, set]:
    """Symbolic alignment plan for one window.

    Returns ``(plan, absent)``: ``plan`` maps ``(branch, j)`` to the
    ``(ref_key, nbr_key)`` pair it aligns, where keys are ``("F", j)`` for
    frame features or ``(branch, j)`` for earlier alignments. Only entries
    needed by the output frames are planned; ``absent`` lists skip-branch
    entries that would need frames outside the window.
    """
    N = layout.N
    lo, hi = -(N + 1), N + 1
    plan: dict = {}
    # forward adjacent: base at -(N+1) from its left neighbour, then chained
    plan[("FA", lo)] = (("F", lo), ("F", lo - 1))
    for j in range(lo + 1, N + 1):
        plan[("FA", j)] = (("F", j), ("FA", j - 1))
    # backward adjacent: mirror
    plan[("BA", hi)] = (("F", hi), ("F", hi + 1))
    for j in range(hi - 1, -N - 1, -1):
        plan[("BA", j)] = (("F", j), ("BA", j + 1))
    # forward skip: bases at -N and -N+1 reach two frames back, then chained
    for j in range(-N, N + 1):
        src = ("F", j - 2) if j <= -N + 1 else ("FS", j - 2)
        plan[("FS", j)] = (("F", j), src)
    # backward skip: mirror
    for j in range(N, -N - 1, -1):
        src = ("F", j + 2) if j >= N - 1 else ("BS", j + 2)
        plan[("BS", j)] = (("F", j), src)
    for j in layout.outputs:
        plan[("AF", j)] = (("F", j), ("F", j))
    absent = {("FS", lo), ("BS", hi)}
    return plan, absent


def build_chains(features: dict, layout: WindowLayout, align_many: Callable) -> ChainResult:
    """Evaluate the alignment plan in dependency waves.

    ``features`` maps frame offset to its feature. ``align_many(pairs)``
    receives a list of ``(ref, nbr)`` pairs whose inputs are all available and
    returns the aligned results in the same order; every wave is one call, so
    independent alignments can be batched.
    """
    missing = [j for j in layout.inputs if j not in features]
    if missing:
        raise ValueError(f"expected {layout.n_inputs} frame features, missing offsets {missing}")
    plan, absent = chain_plan(layout)
    values: dict = {("F", j): f for j, f in features.items()}
    pending = list(plan)
    while pending:
        wave = [key for key in pending if plan[key][1] in values]
        results = align_many([(values[plan[k][0]], values[plan[k][1]]) for k in wave])
        for key, val in zip(wave, results):
            values[key] = val
        pending = [key for key in pending if key not in values]
    res = ChainResult(absent=set(absent))
    for (branch, j) in plan:
        getattr(res, branch)[j] = values[(branch, j)]
    return res


class Predeblur(nn.Module):
    """Strided-conv feature extractor giving a 3-level pyramid (1, 1/2, 1/4)."""

    def __init__(self, C: int):
        super().__init__()
        self.conv_first = Conv(3, C)
        self.down2 = Conv(C, C, stride=2)
        self.res2 = Conv(C, C)
        self.down3 = Conv(C, C, stride=2)
        self.res3 = Conv(C, C)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"frame size {h}x{w} must be divisible by 4")
        l1 = leaky(self.conv_first(x))
        l2 = leaky(self.down2(l1))
        l2 = l2 + leaky(self.res2(l2))
        l3 = leaky(self.down3(l2))
        l3 = l3 + leaky(self.res3(l3))
        return FeaturePyramid([l1, l2, l3])


def alignment_levels(h: int, w: int, max_levels: int = 3) -> int:
    """Pyramid depth for alignment; the coarsest map keeps at least 2 pixels per side."""
    n = 1
    while n < max_levels and min(h, w) % (2**n) == 0 and min(h, w) // (2**n) >= 2:
        n += 1
    return n


class Align(nn.Module):
    """Coarse-to-fine deformable alignment of ``nbr`` onto ``ref``.

    Both inputs are single feature maps at the temporal resolution. A shared
    strided conv builds a small pyramid; offsets predicted at the coarsest
    level are upsampled (and doubled) and refined level by level. The result is
    the finest-level deformable convolution of ``nbr``.
    """

    def __init__(self, C: int, k: int = 3, levels: int = 3):
        super().__init__()
        self.k = k
        self.levels = levels
        n_off = 2 * k * k
        self.down = nn.ModuleList([Conv(C, C, stride=2) for _ in range(levels - 1)])
        self.off_hidden = nn.ModuleList()
        self.off_out = nn.ModuleList()
        self.dcn = nn.ModuleList()
        for _ in range(levels):
            # inputs: ref, nbr, upsampled coarser alignment, upsampled coarser offsets
            self.off_hidden.append(Conv(3 * C + n_off, C))
            self.off_out.append(Conv(C, n_off, zero_init=True))
            self.dcn.append(DeformConv(C, C, k))

    def pyramid(self, x: torch.Tensor, n: int) -> list[torch.Tensor]:
        out = [x]
        for lvl in range(n - 1):
            out.append(leaky(self.down[lvl](out[-1])))
        return out

    def align_with_offsets(self, ref: torch.Tensor, nbr: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Aligned feature and the finest-level offset field (B, 2k^2, h, w)."""
        if ref.shape != nbr.shape:
            raise ValueError(f"ref {tuple(ref.shape)} and nbr {tuple(nbr.shape)} differ")
        n = alignment_levels(*ref.shape[-2:], self.levels)
        refs, nbrs = self.pyramid(ref, n), self.pyramid(nbr, n)
        off = aligned = None
        for lvl in range(n - 1, -1, -1):
            r, s = refs[lvl], nbrs[lvl]
            if off is None:
                up = torch.zeros_like(s)
                base = s.new_zeros(s.shape[0], 2 * self.k * self.k, *s.shape[-2:])
            else:
                base = upsample_offsets(off)
                up = nn.functional.interpolate(aligned, scale_factor=2, mode="bilinear", align_corners=False)
            hidden = leaky(self.off_hidden[lvl](torch.cat([r, s, up, base], 1)))
            off = base + self.off_out[lvl](hidden)
            lim = max(r.shape[-2:]) / 4.0
            off = off.clamp(-lim, lim)
            aligned = self.dcn[lvl](s, off)
            if lvl > 0:
                aligned = leaky(aligned)
        return aligned, off

    def forward(self, ref: torch.Tensor, nbr: torch.Tensor) -> torch.Tensor:
        return self.align_with_offsets(ref, nbr)[0]


class TemporalFusion(nn.Module):
    """Attention fusion of the five aligned branches into one temporal feature."""

    def __init__(self, C: int, attention_target: str = "aligned"):
        super().__init__()
        if attention_target not in ATTENTION_TARGETS:
            raise ValueError(f"attention_target must be one of {ATTENTION_TARGETS}")
        self.attention_target = attention_target
        self.emb_branch = Conv(C, C)
        self.emb_self = Conv(C, C)
        self.fuse = Conv(5 * C, C, k=1)

    def gated(self, y: torch.Tensor, af: torch.Tensor, af_emb: torch.Tensor) -> torch.Tensor:
        gate = sigmoid(self.emb_branch(y) * af_emb)
        carrier = af if self.attention_target == "aligned" else y
        return carrier * gate

    def forward(self, fs: AlignedFeatureSet) -> torch.Tensor:
        af_emb = self.emb_self(fs.AF)
        parts = [self.gated(fs.get(name), fs.AF, af_emb) for name in BRANCHES]
        return self.fuse(torch.cat(parts, 1))


class TemporalModule(nn.Module):
    """Maps ``2N+5`` frames to ``2N+1`` temporal features at 1/4 resolution."""

    def __init__(self, C: int = 16, N: int = 1, attention_target: str = "aligned", k: int = 3):
        super().__init__()
        self.layout = WindowLayout(N)
        self.predeblur = Predeblur(C)
        self.align = Align(C, k)
        self.fusion = TemporalFusion(C, attention_target)

    def features(self, frames: torch.Tensor) -> list[FeaturePyramid]:
        b, n = frames.shape[:2]
        pyr = self.predeblur(frames.reshape(b * n, *frames.shape[2:]))
        levels = [lvl.reshape(b, n, *lvl.shape[1:]) for lvl in pyr.levels]
        return [FeaturePyramid([lvl[:, i] for lvl in levels]) for i in range(n)]

    def align_many(self, pairs: list[tuple[torch.Tensor, torch.Tensor]]) -> list[torch.Tensor]:
        b = pairs[0][0].shape[0]
        ref = torch.cat([p[0] for p in pairs])
        nbr = torch.cat([p[1] for p in pairs])
        return list(self.align(ref, nbr).split(b))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """frames: (B, 2N+5, 3, H, W) -> (B, 2N+1, C, H/4, W/4)."""
        lay = self.layout
        if frames.dim() != 5 or frames.shape[1] != lay.n_inputs:
            raise ValueError(
                f"expected a window of {lay.n_inputs} frames (B, {lay.n_inputs}, 3, H, W), "
                f"got shape {tuple(frames.shape)}"
            )
        pyramids = self.features(frames)
        feats = {j: pyramids[lay.index(j)].feature for j in lay.inputs}
        chains = build_chains(feats, lay, self.align_many)
        sets = [chains.feature_set(j) for j in lay.outputs]
        batched = AlignedFeatureSet(**{
            name: torch.cat([fs.get(name) for fs in sets]) for name in BRANCHES
        })
        out = self.fusion(batched)
        return out.view(lay.n_outputs, frames.shape[0], *out.shape[1:]).transpose(0, 1)
