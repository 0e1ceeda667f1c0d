"""Cora citation network ingestion"""

import logging
import tarfile
from pathlib import Path
from typing import Union

import numpy as np
import requests

from .graph import TextAttributedGraph

logger = logging.getLogger(__name__)

CORA_URL = "https://linqs-data.soe.ucsc.edu/public/lbc/cora.tgz"

PathLike = Union[str, Path]


def fetch_cora(directory: PathLike, url: str = CORA_URL) -> tuple[Path, Path]:
    """Downloads and unpacks the Cora archive unless the files already exist.

    Parameters
    ----------
    directory : str | Path
        Target directory.
    url : str, optional
        Archive location. Defaults to the LINQS mirror.

    Returns
    -------
    Path
        Path of ``cora.content``.
    Path
        Path of ``cora.cites``.
    """
    directory = Path(directory)
    content_path = directory / "cora" / "cora.content"
    cites_path = directory / "cora" / "cora.cites"
    if content_path.is_file() and cites_path.is_file():
        return content_path, cites_path

    directory.mkdir(parents=True, exist_ok=True)
    archive = directory / "cora.tgz"
    logger.info("downloading %s", url)
    response = requests.get(url, timeout=60)
    response.raise_for_status()
    archive.write_bytes(response.content)
    with tarfile.open(archive, "r:gz") as tar:
        tar.extractall(directory, filter="data")
    return content_path, cites_path


def convert_cora(content_path: PathLike, cites_path: PathLike) -> TextAttributedGraph:
    """Converts the tab-separated Cora files into a text-attributed graph.

    Each line of ``cora.content`` holds a paper id, binary word indicators and a
    class name; each line of ``cora.cites`` a cited and a citing paper id.

    Parameters
    ----------
    content_path : str | Path
        Path of ``cora.content``.
    cites_path : str | Path
        Path of ``cora.cites``.

    Returns
    -------
    TextAttributedGraph
        Graph with ids remapped to ``0..N-1`` in file order, symmetrised citations,
        node texts listing the active words as ``w<index>`` and the indicator
        vectors as features.
    """
    content_path, cites_path = Path(content_path), Path(cites_path)
    for path in (content_path, cites_path):
        if not path.is_file():
            raise FileNotFoundError(f"Cora file {path} does not exist.")

    paper_ids: list[str] = []
    rows: list[list[float]] = []
    classes: list[str] = []
    with content_path.open("r", encoding="utf-8") as f:
        for line in f:
            paper_id, *indicators, label = line.split()
            paper_ids.append(paper_id)
            rows.append([float(v) for v in indicators])
            classes.append(label)

    index = {paper_id: i for i, paper_id in enumerate(paper_ids)}
    features = np.array(rows, dtype=np.float64)
    texts = tuple(" ".join(f"w{j}" for j in np.flatnonzero(row)) for row in features)
    label_space = tuple(sorted(set(classes)))
    label_ids = {name: i for i, name in enumerate(label_space)}

    edges: set[tuple[int, int]] = set()
    dropped = 0
    with cites_path.open("r", encoding="utf-8") as f:
        for line in f:
            cited, citing = line.split()
            if cited not in index or citing not in index or cited == citing:
                dropped += 1
                continue
            i, j = index[cited], index[citing]
            edges.add((min(i, j), max(i, j)))
    if dropped:
        logger.warning("dropped %d self-citations or citations to unknown papers", dropped)

    return TextAttributedGraph(
        features=features,
        texts=texts,
        edges=frozenset(edges),
        label_space=label_space,
        labels={i: label_ids[c] for i, c in enumerate(classes)},
    )
