from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader

from blocksel.data import LabeledSubset, labels_of, stratified_subsample
from blocksel.errors import AdapterUnsupportedError, ContractViolation, DatasetError
from blocksel.features import LabeledFeatureSet
from blocksel.ga import Genotype
from blocksel.telemetry import get_logger

log = get_logger(__name__)

MODEL_NAMES = ("efficientnet_b0", "toy")


@dataclass(frozen=True)
class BlockSpec:
    """
    One partition of the network. block_id is 1-based for selectable
    blocks; the stem uses 0 and the head B + 1.
    """

    block_id: int
    prefixes: tuple[str, ...]
    layer_ids: tuple[str, ...]
    param_count: int

    @property
    def output_id(self) -> str:
        return self.prefixes[-1]


@dataclass
class BlockedModel:
    network: nn.Module
    stem: BlockSpec
    blocks: list[BlockSpec]
    head: BlockSpec
    name: str = "custom"
    genotype: Genotype | None = field(default=None)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def parts(self) -> list[BlockSpec]:
        return [self.stem, *self.blocks, self.head]


def _owns(prefix: str, name: str) -> bool:
    return name == prefix or name.startswith(prefix + ".")


def _spec(
    network: nn.Module,
    block_id: int,
    prefixes: Sequence[str],
) -> BlockSpec:
    layer_ids: list[str] = []
    count = 0

    for module_name, module in network.named_modules():
        if not any(_owns(p, module_name) for p in prefixes):
            continue

        direct = list(module.parameters(recurse=False))
        if direct:
            layer_ids.append(module_name)
            count += sum(p.numel() for p in direct)

    return BlockSpec(
        block_id=block_id,
        prefixes=tuple(prefixes),
        layer_ids=tuple(layer_ids),
        param_count=count,
    )


def partition_network(
    network: nn.Module,
    stem: Sequence[str],
    blocks: Sequence[Sequence[str]],
    head: Sequence[str],
    *,
    name: str = "custom",
) -> BlockedModel:
    """
    Split a network into stem, ordered blocks and head by module prefix.

    Every learnable parameter has to fall in exactly one part.
    """

    if not blocks:
        raise AdapterUnsupportedError(f"{name}: no selectable blocks")

    groups = [tuple(stem), *(tuple(b) for b in blocks), tuple(head)]
    modules = dict(network.named_modules())

    for prefixes in groups:
        for prefix in prefixes:
            if prefix not in modules:
                raise AdapterUnsupportedError(f"{name}: no module named {prefix!r}")

    for param_name, _ in network.named_parameters():
        owners = [i for i, g in enumerate(groups) if any(_owns(p, param_name) for p in g)]

        if not owners:
            raise AdapterUnsupportedError(f"{name}: parameter {param_name} is in no block")
        if len(owners) > 1:
            raise AdapterUnsupportedError(f"{name}: parameter {param_name} is in several blocks")

    specs = [_spec(network, i, g) for i, g in enumerate(groups)]

    return BlockedModel(
        network=network,
        stem=specs[0],
        blocks=specs[1:-1],
        head=specs[-1],
        name=name,
    )


class ToyBlockCNN(nn.Module):
    """
    Stem convolution, three conv/BN/pool blocks and a linear head.
    """

    def __init__(self, num_classes: int = 3, in_channels: int = 3) -> None:
        super().__init__()

        self.stem = nn.Conv2d(in_channels, 8, kernel_size=3, padding=1)
        self.block1 = self._block(8, 16)
        self.block2 = self._block(16, 32)
        self.block3 = self._block(32, 32)
        self.head = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(32, num_classes),
        )

        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(module.bias)

    @staticmethod
    def _block(c_in: int, c_out: int) -> nn.Sequential:
        return nn.Sequential(
            nn.Conv2d(c_in, c_out, kernel_size=3, padding=1),
            nn.BatchNorm2d(c_out, momentum=None),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        x = self.block3(self.block2(self.block1(x)))
        return self.head(x)


def _efficientnet_b0(num_classes: int, pretrained: bool, seed: int) -> BlockedModel:
    from torchvision.models import EfficientNet_B0_Weights, efficientnet_b0

    cache = os.getenv("BLOCKSEL_CACHE")
    if cache:
        torch.hub.set_dir(cache)

    weights = EfficientNet_B0_Weights.IMAGENET1K_V1 if pretrained else None
    network = efficientnet_b0(weights=weights)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        in_features = network.classifier[-1].in_features
        network.classifier[-1] = nn.Linear(in_features, num_classes)

    # features.0 is the stem, features.1..7 the MBConv stages and
    # features.8 the final 1x1 convolution in front of the classifier.
    return partition_network(
        network,
        stem=["features.0"],
        blocks=[[f"features.{i}"] for i in range(1, 8)],
        head=["features.8", "classifier"],
        name="efficientnet_b0",
    )


def _toy(num_classes: int, seed: int) -> BlockedModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        network = ToyBlockCNN(num_classes)

    return partition_network(
        network,
        stem=["stem"],
        blocks=[["block1"], ["block2"], ["block3"]],
        head=["head"],
        name="toy",
    )


def build_blocked_model(
    name: str,
    num_classes: int,
    *,
    pretrained: bool = True,
    seed: int = 0,
) -> BlockedModel:
    """
    Fresh network with a seed-controlled classifier head for num_classes.
    """

    if name == "efficientnet_b0":
        return _efficientnet_b0(num_classes, pretrained, seed)

    if name == "toy":
        return _toy(num_classes, seed)

    raise AdapterUnsupportedError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")


def describe_blocks(model: BlockedModel) -> list[BlockSpec]:
    return list(model.blocks)


def _set_requires_grad(model: BlockedModel, spec: BlockSpec, flag: bool) -> None:
    for name, param in model.network.named_parameters():
        if any(_owns(p, name) for p in spec.prefixes):
            param.requires_grad_(flag)


def apply_genotype(model: BlockedModel, genotype: Genotype) -> BlockedModel:
    """
    Mark block i trainable iff bit i is set. The stem is always frozen and
    the head always trainable; weights are left untouched.
    """

    if len(genotype) != model.num_blocks:
        raise ContractViolation(
            f"genotype length {len(genotype)} != number of blocks {model.num_blocks}"
        )

    _set_requires_grad(model, model.stem, False)
    for spec, bit in zip(model.blocks, genotype.bits):
        _set_requires_grad(model, spec, bit == 1)
    _set_requires_grad(model, model.head, True)

    model.genotype = genotype
    return model


def _trainable(model: BlockedModel, spec: BlockSpec) -> bool:
    flags = [
        param.requires_grad
        for name, param in model.network.named_parameters()
        if any(_owns(p, name) for p in spec.prefixes)
    ]
    return bool(flags) and all(flags)


def read_genotype(model: BlockedModel) -> Genotype:
    return Genotype(tuple(int(_trainable(model, spec)) for spec in model.blocks))


def count_trainable_params(model: BlockedModel) -> int:
    return sum(p.numel() for p in model.network.parameters() if p.requires_grad)


def count_params(model: BlockedModel) -> int:
    return sum(p.numel() for p in model.network.parameters())


def trainable_parameters(model: BlockedModel) -> list[nn.Parameter]:
    return [p for p in model.network.parameters() if p.requires_grad]


def set_train_mode(model: BlockedModel) -> None:
    """
    Training mode for the network, inference mode for frozen parts so
    their batch-norm statistics stay fixed.
    """

    model.network.train()

    genotype = model.genotype or read_genotype(model)
    frozen = [model.stem] + [s for s, bit in zip(model.blocks, genotype.bits) if bit == 0]

    for spec in frozen:
        for prefix in spec.prefixes:
            model.network.get_submodule(prefix).eval()


def _pool(output: Any) -> torch.Tensor:
    if isinstance(output, (tuple, list)):
        output = output[0]

    if output.dim() == 4:
        return output.mean(dim=(2, 3))
    if output.dim() == 3:
        return output.mean(dim=2)

    return output.flatten(1)


def extract_activations(
    model: BlockedModel,
    dataset: Any,
    module_name: str,
    n_samples: int,
    seed: int,
    *,
    index_seed: int = 0,
    batch_size: int = 32,
    device: str | torch.device = "cpu",
    block_id: int = 0,
    dataset_id: str = "",
) -> LabeledFeatureSet:
    """
    Globally average-pooled output of one module for a stratified sample.
    """

    if len(dataset) == 0:
        raise DatasetError("cannot extract activations from an empty dataset")

    try:
        module = model.network.get_submodule(module_name)
    except AttributeError as exc:
        raise AdapterUnsupportedError(f"no module named {module_name!r}") from exc

    indices = stratified_subsample(dataset, n_samples, seed, index_seed=index_seed)
    subset = LabeledSubset(dataset, indices)
    loader = DataLoader(subset, batch_size=batch_size, shuffle=False)

    captured: list[torch.Tensor] = []
    handle = module.register_forward_hook(
        lambda _m, _inputs, output: captured.append(_pool(output).detach().cpu())
    )

    was_training = model.network.training
    network = model.network.to(device)
    network.eval()

    try:
        with torch.inference_mode():
            for images, _ in loader:
                network(images.to(device))
    finally:
        handle.remove()
        if was_training:
            set_train_mode(model)

    features = torch.cat(captured).numpy().astype(np.float32)

    return LabeledFeatureSet(
        features=features,
        labels=labels_of(subset),
        block_id=block_id,
        dataset_id=dataset_id,
        seed=seed,
    )


def extract_block_activations(
    model: BlockedModel,
    dataset: Any,
    block_id: int,
    n_samples: int,
    seed: int,
    **kwargs: Any,
) -> LabeledFeatureSet:
    if not 1 <= block_id <= model.num_blocks:
        raise ContractViolation(
            f"block_id must be in 1..{model.num_blocks}, got {block_id}"
        )

    spec = model.blocks[block_id - 1]

    return extract_activations(
        model,
        dataset,
        spec.output_id,
        n_samples,
        seed,
        block_id=block_id,
        **kwargs,
    )


def extract_layer_activations(
    model: BlockedModel,
    dataset: Any,
    layer_id: str,
    n_samples: int,
    seed: int,
    **kwargs: Any,
) -> LabeledFeatureSet:
    return extract_activations(model, dataset, layer_id, n_samples, seed, **kwargs)
