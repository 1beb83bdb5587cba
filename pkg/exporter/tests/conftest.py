import numpy as np
import pytest
from PIL import Image


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text("a boy strolls by a pond\nworkers pour cement\n",
                    encoding="utf-8")
    return path


@pytest.fixture
def image_dir(tmp_path):
    directory = tmp_path / "images"
    directory.mkdir()
    rng = np.random.default_rng(0)
    for sid in range(2):
        array = (rng.random((48, 40, 3)) * 255).astype("uint8")
        Image.fromarray(array).save(directory / f"{sid}.png")
    return directory
