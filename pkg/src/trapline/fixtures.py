"""Synthetic camera-trap fixtures for tests, demos and the acceptance suite.

Each image is a seeded PNG with coloured blobs standing in for animals, a
``.gt.json`` sidecar with their boxes, and a ``.scene.json`` script the mock
vision-language endpoint narrates from. ``python -m trapline.fixtures DIR``
writes the standard fixture (images, corpus and ``run.json``) to DIR.
"""

from __future__ import annotations

import argparse
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from trapline.domain import default_taxonomy
from trapline.ingest import GT_SUFFIX, SCENE_SUFFIX

WIDTH, HEIGHT = 640, 480
RUN_DATE = "2024-10-23"

_DAY_SKY, _NIGHT_SKY = (176, 196, 160), (34, 38, 44)


@dataclass(frozen=True)
class SceneSpec:
    name: str
    species: tuple[tuple[str, int], ...] = ()
    time_of_day: str = "day"
    habitat: tuple[str, ...] = ()
    stamp: str | None = None
    confidence: float | None = None

    @property
    def blank(self) -> bool:
        return not self.species


STANDARD_SCENES = (
    SceneSpec("01_rhino", (("Rhinocerotidae", 3),), "day", ("grass", "bushes")),
    SceneSpec("02_zebra_night", (("Equus quagga", 1),), "night", ("trees", "grass"), "SA08 25/05/2022 05:29:28 WED"),
    SceneSpec("03_wildebeest_zebra", (("Connochaetes taurinus", 4), ("Equus quagga", 2)), "day", ("grass", "trees")),
    SceneSpec("04_giraffe", (("Giraffa camelopardalis", 1),), "day", ("trees", "bushes")),
    SceneSpec("05_pangolin", (("Smutsia gigantea", 1),), "night", ("grass",)),
    SceneSpec("06_elephant", (("Loxodonta africana", 1),), "day", ("bushes", "a waterhole")),
    SceneSpec("07_hyena", (("Crocuta crocuta", 1),), "night", ("a dirt road",)),
    SceneSpec("08_lion", (("Panthera leo", 2),), "day", ("grass",)),
    SceneSpec("09_buffalo", (("Syncerus caffer", 1),), "day", ("a river", "grass")),
    SceneSpec("10_cheetah", (("Acinonyx jubatus", 1),), "day", ("grass", "rocks")),
)

# seven empty frames and three with animals
BLANK_SCENES = (
    SceneSpec("01_rhino", (("Rhinocerotidae", 3),), "day", ("grass",)),
    *(SceneSpec(f"{i:02d}_empty", (), "day" if i % 2 else "night", ("grass", "trees")) for i in range(2, 9)),
    SceneSpec("09_lion", (("Panthera leo", 1),), "day", ("grass",)),
    SceneSpec("10_zebra", (("Equus quagga", 2),), "day", ("trees",)),
)

CONTRAST_CLASSES = (
    "Rhinocerotidae", "Equus quagga", "Connochaetes taurinus", "Giraffa camelopardalis",
    "Loxodonta africana", "Crocuta crocuta", "Panthera leo", "Syncerus caffer",
    "Acinonyx jubatus", "Phacochoerus africanus",
)


def contrast_scenes(per_class: int = 6, animals: int = 2) -> list[SceneSpec]:
    habitats = (("grass",), ("trees", "grass"), ("bushes",), ("a waterhole",), ("a dirt road",), ("rocks",))
    out = []
    for ci, name in enumerate(CONTRAST_CLASSES):
        for j in range(per_class):
            out.append(SceneSpec(
                f"{ci:02d}_{j:02d}_{name.split()[0].lower()}",
                ((name, animals),),
                "night" if (ci + j) % 3 == 0 else "day",
                habitats[(ci + j) % len(habitats)],
            ))
    return out


def _layout(n: int, width: int, height: int) -> list[list[float]]:
    """Non-overlapping boxes in a grid across the lower part of the frame."""
    if n == 0:
        return []
    cols = min(n, 4)
    rows = math.ceil(n / cols)
    cell_w = (width - 40) / cols
    cell_h = min(150.0, (height * 0.6) / rows)
    boxes = []
    for i in range(n):
        r, c = divmod(i, cols)
        x0 = 20 + c * cell_w + 8
        y0 = height * 0.3 + r * cell_h + 8
        boxes.append([round(x0, 1), round(y0, 1), round(x0 + cell_w - 16, 1), round(y0 + cell_h - 16, 1)])
    return boxes


def _colour(name: str) -> tuple[int, int, int]:
    h = sum(ord(ch) * 131 ** i for i, ch in enumerate(name)) % 0xFFFFFF
    return (64 + (h >> 16) % 160, 64 + (h >> 8 & 0xFF) % 160, 64 + (h & 0xFF) % 160)


def render_scene(spec: SceneSpec, seed: int, width: int = WIDTH, height: int = HEIGHT) -> tuple[bytes, list[dict]]:
    """PNG bytes and ground-truth objects for one scene."""
    rng = np.random.default_rng(seed)
    base = np.array(_NIGHT_SKY if spec.time_of_day == "night" else _DAY_SKY, dtype=np.int16)
    noise = rng.integers(-18, 19, size=(height, width, 3), dtype=np.int16)
    pixels = np.clip(base + noise, 0, 255).astype(np.uint8)
    image = Image.fromarray(pixels, "RGB")
    draw = ImageDraw.Draw(image)
    labels = [name for name, count in spec.species for _ in range(count)]
    objects = []
    for name, box in zip(labels, _layout(len(labels), width, height)):
        draw.ellipse(box, fill=_colour(name))
        obj = {"class": name, "bbox": box}
        if spec.confidence is not None:
            obj["confidence"] = spec.confidence
        objects.append(obj)
    buf = io.BytesIO()
    image.save(buf, format="PNG", compress_level=6)
    return buf.getvalue(), objects


def write_scene(directory: Path, spec: SceneSpec, seed: int) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    png, objects = render_scene(spec, seed)
    path = directory / f"{spec.name}.png"
    path.write_bytes(png)
    (directory / f"{spec.name}{GT_SUFFIX}").write_text(
        json.dumps({"image": path.name, "objects": objects}, indent=2) + "\n", "utf-8"
    )
    tax = default_taxonomy()
    script = {
        "species": [{"name": tax.lookup(n).scientific_name, "count": c} for n, c in spec.species],
        "time_of_day": spec.time_of_day,
        "habitat": list(spec.habitat),
        "stamp": spec.stamp,
    }
    (directory / f"{spec.name}{SCENE_SUFFIX}").write_text(json.dumps(script, indent=2) + "\n", "utf-8")
    return path


def write_scenes(directory: str | Path, scenes: Sequence[SceneSpec], seed: int = 0) -> list[Path]:
    directory = Path(directory)
    return [write_scene(directory, spec, seed * 1000 + i) for i, spec in enumerate(scenes)]


# --------------------------------------------------------------------------- corpus

CORPUS = (
    ("rhinoceros", "Rhinoceros",
     "Rhinoceroses are large, thick-skinned herbivores of the family Rhinocerotidae. Five species "
     "survive today, two of them in Africa. The white rhinoceros is listed by the IUCN as Near "
     "Threatened, while the black rhinoceros is Critically Endangered. An adult white rhinoceros "
     "commonly weighs between 1,700 and 2,300 kg, which makes it one of the heaviest land animals. "
     "White rhinos are grazers that crop short grass with their broad lips and keep grazing lawns "
     "open for smaller herbivores. Poaching for horn is the main threat to rhinoceros populations, "
     "followed by habitat loss. Healthy adults have no natural predators, although lions and spotted "
     "hyenas occasionally take calves. Rhinos are most active in the cooler hours of morning and "
     "evening and rest in shade or wallow in mud during the heat of the day."),
    ("plains_zebra", "Plains zebra",
     "The plains zebra (Equus quagga) is the most widespread zebra of eastern and southern Africa. "
     "Its IUCN conservation status is Near Threatened after population declines across its range. "
     "Adults weigh from 175 to 385 kg. Plains zebras live in harems of one stallion with several mares "
     "and gather into large herds that migrate alongside blue wildebeest. They are grazers of tall, "
     "coarse grass, which opens the sward for species that prefer shorter growth. Lions and spotted "
     "hyenas are the main predators of zebras, while leopards, cheetahs and African wild dogs target "
     "foals. Hunting for skins and competition with livestock are the main human threats. Zebras "
     "graze for much of the day and night, resting in short bouts while standing."),
    ("blue_wildebeest", "Blue wildebeest",
     "The blue wildebeest (Connochaetes taurinus) is a large antelope with a grey-blue coat and dark "
     "vertical stripes on the neck. The IUCN lists it as Least Concern. Males weigh around 250 kg and "
     "females around 180 kg. Blue wildebeest are highly gregarious grazers and are best known for "
     "their mass migrations across the Serengeti and Masai Mara. Their grazing and trampling shape "
     "grassland structure, and their calving season feeds many predators. Lions, spotted hyenas, "
     "cheetahs, African wild dogs and Nile crocodiles all prey on wildebeest. Fences that block "
     "migration routes and the loss of grazing land are the principal threats."),
    ("giraffe", "Giraffe",
     "The giraffe (Giraffa camelopardalis) is the tallest living land animal, with males reaching "
     "5.5 metres. The IUCN classifies the giraffe as Vulnerable. Bulls weigh about 1,200 kg and cows "
     "about 830 kg. Giraffes browse the leaves, shoots and flowers of acacia and other tall trees, "
     "feeding above the reach of other herbivores, and they disperse seeds over long distances. "
     "Lions are the only serious predator of adult giraffes; calves are also taken by leopards and "
     "spotted hyenas. Habitat fragmentation and poaching for meat threaten giraffe populations."),
    ("giant_pangolin", "Giant ground pangolin",
     "The giant ground pangolin (Smutsia gigantea, formerly Manis gigantea) is the largest pangolin, "
     "weighing up to 33 kg. Its IUCN status is Endangered. It is nocturnal and feeds almost "
     "entirely on ants and termites, which it digs out with powerful claws, so it helps regulate "
     "insect populations. Illegal international trade in pangolin scales and meat is the main "
     "threat, together with habitat loss. Adults roll into an armoured ball when threatened by lions "
     "or leopards."),
    ("african_elephant", "African bush elephant",
     "The African bush elephant (Loxodonta africana) is the largest living land animal; bulls can "
     "weigh 6,000 kg. The IUCN listed the species as Endangered in 2021. Elephants are a keystone "
     "species and ecosystem engineers: by pushing over trees and uprooting shrubs they turn woodland "
     "into grassland, dig for water in dry riverbeds and disperse the seeds of many plants. Poaching "
     "for ivory and conflict with farmers over crops are the main threats. Adults have no natural "
     "predators, but lions sometimes kill calves."),
    ("spotted_hyena", "Spotted hyena",
     "The spotted hyena (Crocuta crocuta) is the largest hyena and is listed by the IUCN as Least "
     "Concern. Adults weigh between 40 and 86 kg, and females are larger than males. Spotted hyenas "
     "are skilled hunters as well as scavengers and live in clans led by females. They are mostly "
     "active at night. Lions are their only significant natural predator and main competitor; "
     "humans persecute hyenas through snaring and poisoning."),
    ("african_lion", "African lion",
     "The African lion (Panthera leo) is listed by the IUCN as Vulnerable. Males weigh 150 to 250 kg "
     "and females 110 to 180 kg. Lions live in prides and are apex predators that hunt wildebeest, "
     "zebra, buffalo and antelope, controlling herbivore numbers. They rest for up to twenty hours "
     "a day and are most active at dusk and during the night, so daytime images usually show "
     "lions resting or lying in the grass. Habitat loss, prey depletion and retaliatory killing by "
     "livestock owners are the main threats."),
    ("african_buffalo", "African buffalo",
     "The African buffalo (Syncerus caffer) is a large bovine listed by the IUCN as Near Threatened. "
     "Bulls weigh from 425 to 870 kg. Buffalo form large herds that graze tall grass near water and "
     "wallow in mud. Lions are their main predator and Nile crocodiles take buffalo at river "
     "crossings. Disease transmitted from cattle and habitat loss threaten buffalo populations."),
    ("cheetah", "Cheetah",
     "The cheetah (Acinonyx jubatus) is the fastest land animal and is listed by the IUCN as "
     "Vulnerable. Adults weigh 21 to 72 kg. Cheetahs hunt by day, chasing gazelles and impala over "
     "short distances, and keep small antelope populations in check. Lions and spotted hyenas kill "
     "many cheetah cubs and steal kills from adults. Habitat loss and conflict with farmers are the "
     "main threats to the species."),
)


def write_corpus(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for doc_id, title, body in CORPUS:
        path = directory / f"{doc_id}.json"
        path.write_text(json.dumps({"doc_id": doc_id, "title": title, "body": body}, indent=2) + "\n", "utf-8")
        paths.append(path)
    return paths


@dataclass
class FixtureLayout:
    root: Path
    images: Path
    corpus: Path
    config: Path
    scenes: list[SceneSpec] = field(default_factory=list)


def run_config(vlm: dict | None = None, detector: dict | None = None, **extra) -> dict:
    cfg = {
        "images": "images",
        "corpus": "corpus",
        "output_root": "out",
        "detector": {"mock": True, **(detector or {})},
        "vlm": {"mock": True, **(vlm or {})},
        "workers": 4,
        "seed": 7,
        "run_date": RUN_DATE,
        "retry": {"attempts": 3, "base_delay": 0.01},
    }
    cfg.update(extra)
    return cfg


def build_fixture(
    root: str | Path,
    scenes: Sequence[SceneSpec] = STANDARD_SCENES,
    *,
    seed: int = 0,
    config: dict | None = None,
) -> FixtureLayout:
    root = Path(root)
    images, corpus = root / "images", root / "corpus"
    write_scenes(images, scenes, seed)
    write_corpus(corpus)
    config_path = root / "run.json"
    config_path.write_text(json.dumps(config or run_config(), indent=2) + "\n", "utf-8")
    return FixtureLayout(root, images, corpus, config_path, list(scenes))


def main(argv: Sequence[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description="write a synthetic camera-trap fixture")
    ap.add_argument("root", type=Path)
    ap.add_argument("--kind", choices=("standard", "blank", "contrast"), default="standard")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    scenes = {"standard": STANDARD_SCENES, "blank": BLANK_SCENES, "contrast": contrast_scenes()}[args.kind]
    layout = build_fixture(args.root, scenes, seed=args.seed)
    print(f"wrote {len(layout.scenes)} images to {layout.images} and config {layout.config}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
