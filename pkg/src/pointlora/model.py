"""Point-MAE style classifier with PointLoRA attached.

Also hosts the freeze policy, the parameter auditor and adapter merging,
since all three are defined in terms of the assembled model's parameter names.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from . import tensor as T
from .adapters import AdaptedLinear, LoraAdapter, MaskPredictor, PromptMlp, SelectionState, \
    lora_merge, select_topk_tokens
from .config import ModelConfig
from .nn import BatchNorm1d, LayerNorm, Linear, Module, Parameter, dropout
from .tensor import Tensor
from .tokenizer import CLASS, PATCH, PROMPT, MiniPointNet, PositionalEmbedding, TokenSequence
from .transformer import Block, Encoder, pool_features

COMPONENTS = (
    "tokenizer", "pos_embed", "cls", "backbone_linear", "norms",
    "lora", "prompt_mlp", "mask_predictor", "prompt_tokenizer", "head",
)


class ClassificationHead(Module):
    """2d -> hidden -> hidden -> C with norm, ReLU and dropout between layers."""

    def __init__(self, rng, in_features: int, hidden: int, num_classes: int, drop: float = 0.5):
        self.fc1 = Linear(rng, in_features, hidden)
        self.norm1 = BatchNorm1d(hidden)
        self.fc2 = Linear(rng, hidden, hidden)
        self.norm2 = BatchNorm1d(hidden)
        self.fc3 = Linear(rng, hidden, num_classes)
        self.drop = drop

    def forward(self, x: Tensor, rng=None) -> Tensor:
        x = dropout(T.relu(self.norm1(self.fc1(x))), self.drop, self.training, rng)
        x = dropout(T.relu(self.norm2(self.fc2(x))), self.drop, self.training, rng)
        return self.fc3(x)


@dataclass
class ModelOutput:
    logits: Tensor
    scores: list = field(default_factory=list)
    selection: SelectionState | None = None
    sequence: TokenSequence | None = None

    def all_scores(self) -> Tensor | None:
        """Scores of every generated multi-scale token, (B, N_total)."""
        if not self.scores:
            return None
        return self.scores[0] if len(self.scores) == 1 else T.concat(self.scores, axis=1)


def _site_layer(block: Block, site: str):
    return block.attn.qkv if site == "qkv" else block.attn.proj if site == "proj" else getattr(block, site)


def _set_site_layer(block: Block, site: str, layer) -> None:
    if site in ("qkv", "proj"):
        setattr(block.attn, site, layer)
    else:
        setattr(block, site, layer)


class PointClassifier(Module):
    def __init__(self, cfg: ModelConfig, backbone_seed: int = 0, peft_seed: int = 1):
        self.cfg = cfg
        enc, tok = cfg.encoder, cfg.tokenizer
        rng = np.random.default_rng(backbone_seed)
        self.tokenizer = MiniPointNet(rng, enc.dim, tok.h1, tok.h2)
        self.pos_embed = PositionalEmbedding(rng, enc.dim, tok.pos_hidden)
        self.cls_token = Parameter(rng.normal(0.0, 0.02, size=enc.dim))
        self.cls_pos = Parameter(rng.normal(0.0, 0.02, size=enc.dim))
        self.encoder = Encoder(rng, enc)

        prng = np.random.default_rng(peft_seed)
        self.head = ClassificationHead(prng, 2 * enc.dim, cfg.head.hidden, cfg.num_classes, cfg.head.dropout)
        self.mask_predictor = None
        self.prompt_tokenizer = None
        self.prompt_qkv = None
        self.prompt_ffn = None
        if cfg.peft.method == "pointlora":
            self._attach_pointlora(prng)

    @property
    def selection_enabled(self) -> bool:
        return self.mask_predictor is not None

    def _attach_pointlora(self, rng) -> None:
        p, enc = self.cfg.peft, self.cfg.encoder
        d, dff = enc.dim, enc.ffn_dim
        if p.token_selection:
            self.mask_predictor = MaskPredictor(rng, d, p.mask_hidden or d)
            if p.train_prompt_tokenizer:
                self.prompt_tokenizer = copy.deepcopy(self.tokenizer)
            shapes = {"qkv": (d, 3 * d), "fc1": (d, dff), "fc2": (dff, d)}
            for site in p.prompt_sites:
                mlp = PromptMlp(rng, shapes[site][0], p.prompt_dim, shapes[site][1])
                if site == "qkv":
                    self.prompt_qkv = mlp
                else:
                    self.prompt_ffn = mlp

        blocks = range(enc.depth) if p.inject_blocks is None else p.inject_blocks
        for i in blocks:
            blk = self.encoder.blocks[i]
            for site in ("qkv", "proj", "fc1", "fc2"):
                base = _site_layer(blk, site)
                adapters = []
                if site in p.lora_targets and not p.merged:
                    if site == "qkv" and p.qkv_split:
                        adapters = [LoraAdapter(rng, d, d, p.rank, p.scaling) for _ in range(3)]
                    else:
                        adapters = [LoraAdapter(rng, base.in_features, base.out_features, p.rank, p.scaling)]
                prompt = None
                if self.mask_predictor is not None and site in p.prompt_sites:
                    prompt = self.prompt_qkv if site == "qkv" else self.prompt_ffn
                if adapters or prompt is not None:
                    _set_site_layer(blk, site, AdaptedLinear(base, adapters, prompt))

    def adapted_layers(self) -> list[tuple[str, AdaptedLinear]]:
        out = []
        for i, blk in enumerate(self.encoder.blocks):
            for site in ("qkv", "proj", "fc1", "fc2"):
                layer = _site_layer(blk, site)
                if isinstance(layer, AdaptedLinear):
                    out.append((f"blocks.{i}.{site}", layer))
        return out

    # geometry -------------------------------------------------------------

    def group(self, clouds):
        """Backbone and per-scale patches for a batch of (N_i, 3) arrays."""
        tok = self.cfg.tokenizer
        wanted = [(tok.num_groups, tok.group_size)]
        if self.selection_enabled:
            wanted += [tuple(s) for s in self.cfg.peft.multiscale.scales]
        wanted = list(dict.fromkeys(wanted))
        g_max = max(g for g, _ in wanted)
        out = {key: ([], []) for key in wanted}
        for pts in clouds:
            pts = np.asarray(pts.points if isinstance(pts, geometry.PointCloud) else pts, dtype=np.float64)
            if len(pts) < g_max:
                raise ValueError(f"cloud has {len(pts)} points, need at least {g_max}")
            # greedy FPS is prefix-consistent: the first g picks of a longer run are FPS(g)
            order = geometry.farthest_point_sampling(pts, g_max, self.cfg.fps_seed_index)
            for g, k in wanted:
                centers = order[:g]
                patches = geometry.group_and_center(pts, centers, geometry.k_nearest_neighbors(pts, centers, k))
                out[(g, k)][0].append(patches.neighbors)
                out[(g, k)][1].append(patches.centers)
        return {key: (np.stack(nb), np.stack(c)) for key, (nb, c) in out.items()}

    # forward --------------------------------------------------------------

    def forward(self, clouds, rng=None) -> ModelOutput:
        groups = self.group(clouds)
        tok = self.cfg.tokenizer
        nb, centers = groups[(tok.num_groups, tok.group_size)]
        b, d = len(nb), self.cfg.encoder.dim

        parts = [T.broadcast_to(self.cls_token.reshape(1, 1, d), (b, 1, d)), self.tokenizer(nb)]
        pos = [T.broadcast_to(self.cls_pos.reshape(1, 1, d), (b, 1, d)), self.pos_embed(centers)]
        roles = (CLASS,) + (PATCH,) * tok.num_groups
        all_centers = [np.zeros((b, 1, 3)), centers]

        scores, selection = [], None
        if self.selection_enabled:
            ms = self.cfg.peft.multiscale
            embed = self.prompt_tokenizer or self.tokenizer
            scale_tokens, scale_centers = [], []
            for g, k in ms.scales:
                nb_m, c_m = groups[(g, k)]
                t_m = embed(nb_m)
                scale_tokens.append(t_m)
                scale_centers.append(c_m)
                scores.append(self.mask_predictor(t_m))
            selection = select_topk_tokens(scale_tokens, scores, scale_centers, ms.selected)
            parts.append(selection.tokens)
            pos.append(self.pos_embed(selection.centers))
            roles += (PROMPT,) * selection.num_selected
            all_centers.append(selection.centers)

        x = T.concat(parts, axis=1) + T.concat(pos, axis=1)
        seq = TokenSequence(x, np.concatenate(all_centers, axis=1), roles)
        h = self.encoder(x, rng)
        feats = pool_features(h, roles, self.cfg.peft.pool_prompts)
        return ModelOutput(self.head(feats, rng), scores, selection, seq)

    def inspect_tokens(self, points) -> list[dict]:
        """Per-scale centers, scores and selected flags for a single cloud."""
        if not self.selection_enabled:
            raise ValueError("model has no token selection")
        groups = self.group([points])
        out = self.forward([points])
        report = []
        for m, (g, k) in enumerate(self.cfg.peft.multiscale.scales):
            selected = np.zeros(g, dtype=bool)
            selected[out.selection.indices[m][0]] = True
            report.append({"scale": m, "num_groups": g, "group_size": k,
                           "centers": groups[(g, k)][1][0], "scores": out.scores[m].data[0],
                           "selected": selected})
        return report


def build_model(cfg: ModelConfig, backbone_seed: int = 0, peft_seed: int = 1) -> PointClassifier:
    model = PointClassifier(cfg, backbone_seed, peft_seed)
    apply_freeze_policy(model)
    return model


# freeze policy ------------------------------------------------------------

_NORM = re.compile(r"^encoder\.(norm|blocks\.\d+\.norm[12])\.")


def component_of(name: str) -> str:
    if ".adapters." in name:
        return "lora"
    if _NORM.match(name):
        return "norms"
    if name in ("cls_token", "cls_pos"):
        return "cls"
    for prefix, comp in (("tokenizer.", "tokenizer"), ("pos_embed.", "pos_embed"),
                         ("encoder.", "backbone_linear"), ("prompt_qkv.", "prompt_mlp"),
                         ("prompt_ffn.", "prompt_mlp"), ("mask_predictor.", "mask_predictor"),
                         ("prompt_tokenizer.", "prompt_tokenizer"), ("head.", "head")):
        if name.startswith(prefix):
            return comp
    raise KeyError(f"parameter {name!r} belongs to no known component")


def trainable_components(cfg: ModelConfig) -> set[str]:
    p = cfg.peft
    if p.method == "full":
        return set(COMPONENTS)
    if p.method == "linear_probe":
        return {"head"}
    comps = {"lora", "prompt_mlp", "mask_predictor", "prompt_tokenizer", "head"}
    if p.train_norms:
        comps.add("norms")
    if p.train_cls:
        comps.add("cls")
    return comps


def apply_freeze_policy(model: PointClassifier) -> dict[str, bool]:
    """Set ``requires_grad`` per the model's PEFT config; returns name -> trainable."""
    comps = trainable_components(model.cfg)
    registry = {}
    for name, param in model.named_parameters():
        param.requires_grad = component_of(name) in comps
        registry[name] = param.requires_grad
    return registry


def trainable_parameters(model: Module) -> list[tuple[str, Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


@dataclass
class AuditReport:
    total: int
    tunable: int
    breakdown: dict

    @property
    def ratio(self) -> float:
        return self.tunable / self.total

    def as_dict(self) -> dict:
        return {"total": self.total, "tunable": self.tunable, "ratio": self.ratio,
                "components": self.breakdown}


def audit_parameters(model: PointClassifier, registry: dict[str, bool] | None = None) -> AuditReport:
    registry = registry if registry is not None else {n: p.requires_grad for n, p in model.named_parameters()}
    breakdown = {c: {"total": 0, "tunable": 0} for c in COMPONENTS}
    total = tunable = 0
    for name, param in model.named_parameters():
        comp = breakdown[component_of(name)]
        n = int(param.data.size)
        comp["total"] += n
        total += n
        if registry.get(name, False):
            comp["tunable"] += n
            tunable += n
    breakdown = {c: v for c, v in breakdown.items() if v["total"]}
    return AuditReport(total, tunable, breakdown)


# merging ------------------------------------------------------------------


def merge_adapters(model: PointClassifier) -> PointClassifier:
    """Fold every LoRA update into its frozen weight, in place.

    Prompt MLPs, the mask predictor and the head stay; adapter factors go.
    """
    layers = [layer for _, layer in model.adapted_layers() if layer.adapters]
    if not layers:
        raise ValueError("no adapters found")
    for layer in layers:
        layer.weight.data = lora_merge(layer)
        layer.adapters = []
    model.cfg = copy.deepcopy(model.cfg)
    model.cfg.peft.merged = True
    return model
