import numpy as np
import pytest

from attribroi.atlas import RoiAtlas
from attribroi.model import MiniHViT, ModelConfig

# Region names and Brodmann designations as printed in the published
# per-method top-region tables (saliency, Grad-CAM, SHAP).
REGIONS = {
    1: ("Insula", ["BA 13", "BA 16"]),
    2: ("Claustrum", []),
    3: ("Parietal lobe", ["BA 5"]),
    4: ("Thalamus", []),
    5: ("Temporal lobe", ["BA 15"]),
    6: ("Calcarine sulcus (Occipital lobe)", ["BA 17"]),
    7: ("Cuneus", ["BA 17"]),
    8: ("Mid. frontal gyrus", []),
    9: ("Mid. temporal gyrus & Inf. temporal gyrus", ["BA 21", "BA 20"]),
    10: ("Sup. temporal gyrus", ["BA 22"]),
}
REFERENCE_SALIENCY = ["Insula", "Claustrum", "Parietal lobe", "Thalamus", "Temporal lobe",
                  "Calcarine sulcus (Occipital lobe)", "Cuneus"]
REFERENCE_GRADCAM = ["Mid. frontal gyrus", "Mid. temporal gyrus & Inf. temporal gyrus",
                 "Calcarine sulcus (Occipital lobe)", "Cuneus", "Insula"]
REFERENCE_SHAP = ["Sup. temporal gyrus", "Calcarine sulcus (Occipital lobe)", "Cuneus",
              "Mid. temporal gyrus & Inf. temporal gyrus", "Parietal lobe"]


def region_atlas():
    labels = np.arange(1, 11).reshape(2, 5)
    return RoiAtlas(labels=labels, names={k: v[0] for k, v in REGIONS.items()},
                    brodmann={k: v[1] for k, v in REGIONS.items()})


def ids_for(names):
    lookup = {v[0]: k for k, v in REGIONS.items()}
    return [lookup[n] for n in names]


@pytest.fixture
def reference_atlas():
    return region_atlas()


@pytest.fixture
def reference_lists():
    return ids_for(REFERENCE_SALIENCY), ids_for(REFERENCE_GRADCAM), ids_for(REFERENCE_SHAP)


def small_config(**kw):
    base = dict(image_size=8, channels=1, patch_size=2, stage_embed_dims=(8, 16),
                stage_depths=(1, 1), heads_per_stage=(2, 2), seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def small_model():
    return MiniHViT(small_config())


# acceptance criteria register a one-line verdict here; printed in the terminal summary
ACCEPTANCE = {}


@pytest.fixture
def verdict():
    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
