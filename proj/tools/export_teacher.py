#!/usr/bin/env python3
"""Export a frozen teacher encoder as TorchScript for the C++ trainer.

The exported module provides
    stage_features(x) -> List[Tensor]   all five stage outputs
    global_embedding(x) -> Tensor       B x D
and the attributes `prompts` (List[str]) and `text_table` (one row per prompt).

Inputs arrive already resized and normalized by the trainer.

    python3 tools/export_teacher.py --arch tiny --out teachers/
    python3 tools/export_teacher.py --arch resnet50 --out teachers/ --pretrained
    python3 tools/export_teacher.py --arch clip --out teachers/
"""
import argparse
import json
import os
from typing import List

import torch
import torch.nn as nn
import torch.nn.functional as F

PROMPTS = ["An image with snow", "An image with raindrops", "An image with heavy rain and haze"]


class TinyTeacher(nn.Module):
    def __init__(self, seed: int, dim: int = 512):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        chans = [16, 32, 64, 96, 128]
        strides = [4, 1, 2, 2, 2]
        convs = []
        cin = 3
        for c, s in zip(chans, strides):
            k = 7 if s == 4 else 3
            conv = nn.Conv2d(cin, c, k, stride=s, padding=k // 2)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / (cin * k * k)) ** 0.5)
                conv.bias.zero_()
            convs.append(conv)
            cin = c
        self.convs = nn.ModuleList(convs)
        self.head = nn.Linear(2 * sum(chans), dim)
        with torch.no_grad():
            self.head.weight.copy_(torch.randn(self.head.weight.shape, generator=g) / (2 * sum(chans)) ** 0.5)
            self.head.bias.zero_()
        self.prompts: List[str] = list(PROMPTS)
        table = torch.randn(len(PROMPTS), dim, generator=g)
        self.text_table = F.normalize(table, dim=1)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        return self.stage_features(x)

    @torch.jit.export
    def stage_features(self, x: torch.Tensor) -> List[torch.Tensor]:
        out: List[torch.Tensor] = []
        for conv in self.convs:
            x = F.gelu(conv(x))
            out.append(x)
        return out

    @torch.jit.export
    def global_embedding(self, x: torch.Tensor) -> torch.Tensor:
        pooled: List[torch.Tensor] = []
        for f in self.stage_features(x):
            pooled.append(f.mean(dim=(2, 3)))
            pooled.append(f.std(dim=(2, 3)))
        return self.head(torch.cat(pooled, dim=1))


class ResNetTeacher(nn.Module):
    """ImageNet ResNet-50: stem (after max pool) and layer1..layer4; global = pooled layer4."""

    def __init__(self, pretrained: bool):
        super().__init__()
        import torchvision

        weights = torchvision.models.ResNet50_Weights.IMAGENET1K_V2 if pretrained else None
        net = torchvision.models.resnet50(weights=weights)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4
        self.prompts: List[str] = []
        self.text_table = torch.zeros(0, 2048)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        return self.stage_features(x)

    @torch.jit.export
    def stage_features(self, x: torch.Tensor) -> List[torch.Tensor]:
        s0 = self.stem(x)
        s1 = self.layer1(s0)
        s2 = self.layer2(s1)
        s3 = self.layer3(s2)
        s4 = self.layer4(s3)
        return [s0, s1, s2, s3, s4]

    @torch.jit.export
    def global_embedding(self, x: torch.Tensor) -> torch.Tensor:
        return self.stage_features(x)[4].mean(dim=(2, 3))


class _ClipStages(nn.Module):
    def __init__(self, vision: nn.Module, layers: List[int], side: int):
        super().__init__()
        self.vision = vision
        self.layers = layers
        self.side = side

    def forward(self, x: torch.Tensor):
        hidden = self.vision(pixel_values=x, output_hidden_states=True).hidden_states
        feats = []
        for i in self.layers:
            t = hidden[i][:, 1:, :]
            feats.append(t.transpose(1, 2).reshape(t.shape[0], t.shape[2], self.side, self.side))
        return tuple(feats)


class _ClipGlobal(nn.Module):
    def __init__(self, vision: nn.Module, projection: nn.Module):
        super().__init__()
        self.vision = vision
        self.projection = projection

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.projection(self.vision(pixel_values=x).pooler_output)


class ClipTeacher(nn.Module):
    """CLIP ViT image tower. Stages are the token grids of five transformer layers."""

    def __init__(self, stages: nn.Module, glob: nn.Module, text_table: torch.Tensor):
        super().__init__()
        self.stages = stages
        self.glob = glob
        self.prompts: List[str] = list(PROMPTS)
        self.text_table = text_table

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        return self.stage_features(x)

    @torch.jit.export
    def stage_features(self, x: torch.Tensor) -> List[torch.Tensor]:
        a, b, c, d, e = self.stages(x)
        return [a, b, c, d, e]

    @torch.jit.export
    def global_embedding(self, x: torch.Tensor) -> torch.Tensor:
        return self.glob(x)


def build_clip(model_name: str, random_init: bool):
    from transformers import CLIPConfig, CLIPModel

    if random_init:
        torch.manual_seed(0)
        cfg = CLIPConfig(
            vision_config={"hidden_size": 64, "intermediate_size": 128, "num_hidden_layers": 12,
                           "num_attention_heads": 4, "image_size": 64, "patch_size": 16},
            text_config={"hidden_size": 64, "intermediate_size": 128, "num_hidden_layers": 2,
                         "num_attention_heads": 4},
            projection_dim=512)
        model = CLIPModel(cfg).eval()
        text = torch.randn(len(PROMPTS), cfg.projection_dim)
    else:
        from transformers import CLIPTokenizer

        model = CLIPModel.from_pretrained(model_name).eval()
        tok = CLIPTokenizer.from_pretrained(model_name)
        with torch.no_grad():
            text = model.get_text_features(**tok(PROMPTS, padding=True, return_tensors="pt"))
    vcfg = model.vision_model.config
    example = torch.zeros(1, 3, vcfg.image_size, vcfg.image_size)
    with torch.no_grad():
        stages = torch.jit.trace(_ClipStages(model.vision_model, [2, 4, 6, 8, 12], vcfg.image_size // vcfg.patch_size), example, strict=False)
        glob = torch.jit.trace(_ClipGlobal(model.vision_model, model.visual_projection), example, strict=False)
    spec = {"stage_channels": [vcfg.hidden_size] * 5, "stage_strides": [vcfg.patch_size] * 5,
            "global_dim": model.visual_projection.out_features, "input_size": vcfg.image_size}
    return ClipTeacher(stages, glob, F.normalize(text, dim=1)), spec


def spec_for(arch: str) -> dict:
    if arch == "tiny":
        return {"stage_channels": [16, 32, 64, 96, 128], "stage_strides": [4, 4, 8, 16, 32], "global_dim": 512,
                "input_size": 0}
    return {"stage_channels": [64, 256, 512, 1024, 2048], "stage_strides": [4, 4, 8, 16, 32],
            "global_dim": 2048, "input_size": 224,
            "mean": [0.485, 0.456, 0.406], "std": [0.229, 0.224, 0.225]}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--arch", choices=["tiny", "resnet50", "clip"], default="tiny")
    ap.add_argument("--name", help="file stem (default: the arch name)")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=0, help="tiny teacher weights")
    ap.add_argument("--pretrained", action="store_true", help="download ImageNet weights (resnet50)")
    ap.add_argument("--clip-model", default="openai/clip-vit-base-patch32")
    ap.add_argument("--clip-random", action="store_true", help="small random CLIP, no download (testing)")
    args = ap.parse_args()

    name = args.name or args.arch
    if args.arch == "tiny":
        teacher, spec = TinyTeacher(args.seed), spec_for("tiny")
    elif args.arch == "resnet50":
        teacher, spec = ResNetTeacher(args.pretrained).eval(), spec_for("resnet50")
    else:
        teacher, spec = build_clip(args.clip_model, args.clip_random)
    scripted = torch.jit.script(teacher)

    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, name + ".pt")
    scripted.save(path)
    spec["name"] = name
    with open(os.path.join(args.out, name + ".spec.json"), "w") as f:
        json.dump(spec, f, indent=2)
    print(path)


if __name__ == "__main__":
    main()
