"""
Dataset Download Service
Fetches the official MNIST and CIFAR-10 archives into the dataset cache root
with retrying HTTP requests.
"""

import logging
from pathlib import Path
from typing import List

import httpx
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from ..config.settings import DatasetSources, settings
from .exceptions import IngestionError

logger = logging.getLogger(__name__)


class DatasetDownloadService:
    """Downloads dataset archives with retries and atomic file replacement"""

    def __init__(self, timeout: float = None, retries: int = None):
        self.timeout = timeout or settings.download_timeout
        self.retries = retries or settings.download_retries

    def download(self, name: str, root: Path) -> List[Path]:
        root = Path(root).expanduser()
        root.mkdir(parents=True, exist_ok=True)
        if name == "mnist":
            targets = [
                (f"{DatasetSources.MNIST_BASE_URL}/{base}.gz", root / f"{base}.gz")
                for base, _ in DatasetSources.MNIST_FILES.values()
            ]
        elif name == "cifar10":
            targets = [(DatasetSources.CIFAR10_URL, root / DatasetSources.CIFAR10_ARCHIVE)]
        else:
            raise IngestionError(root, f"no download source for dataset '{name}'")

        fetched = []
        for url, destination in targets:
            if destination.is_file():
                logger.info(f"Already present: {destination}")
                fetched.append(destination)
                continue
            try:
                self._fetch(url, destination)
            except httpx.HTTPError as e:
                raise IngestionError(destination, f"download from {url} failed: {e}")
            fetched.append(destination)
        return fetched

    def _fetch(self, url: str, destination: Path):
        fetch = retry(
            stop=stop_after_attempt(self.retries),
            wait=wait_exponential(multiplier=1, min=1, max=10),
            retry=retry_if_exception_type((httpx.TransportError, httpx.HTTPStatusError)),
            reraise=True,
        )(self._stream_to_file)
        fetch(url, destination)

    def _stream_to_file(self, url: str, destination: Path):
        logger.info(f"Downloading {url}")
        partial = destination.with_suffix(destination.suffix + ".part")
        with httpx.stream("GET", url, timeout=self.timeout, follow_redirects=True) as response:
            response.raise_for_status()
            with open(partial, "wb") as handle:
                for chunk in response.iter_bytes():
                    handle.write(chunk)
        partial.replace(destination)
        logger.info(f"✅ Saved {destination}")


def download_dataset(name: str, root: Path) -> List[Path]:
    return DatasetDownloadService().download(name, root)
