"""数据管道模块.

IDX 二进制读取、按标签倾斜的非独立同分布划分、小/大样本量切分，
以及用于快速测试的合成数据生成器。
"""

import csv
import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from config import DatasetKind, RunConfig, SizeRegime
from errors import AllocationError, FormatError, InvalidArgumentError
from rng import derive_seed

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# 每个客户端每个分配类别的 (训练, 测试) 样本数
SPLIT_COUNTS: Dict[Tuple[str, str], Tuple[int, int]] = {
    ("mnist", "small"): (50, 950),
    ("mnist", "large"): (900, 300),
    ("fmnist", "small"): (50, 950),
    ("fmnist", "large"): (900, 300),
    ("cifar", "small"): (25, 475),
    ("cifar", "large"): (450, 150),
}

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True, eq=False)
class Dataset:
    """特征矩阵与类别标签，构造后只读."""

    x: np.ndarray
    y: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64)
        y = np.array(self.y, dtype=np.int64).reshape(-1)
        if x.ndim != 2:
            raise InvalidArgumentError(f"特征必须是二维矩阵，实际维度 {x.ndim}")
        if x.shape[0] != y.size:
            raise InvalidArgumentError(f"样本数 {x.shape[0]} 与标签数 {y.size} 不一致")
        if self.class_count < 1:
            raise InvalidArgumentError("class_count 必须为正")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise InvalidArgumentError(f"标签超出 [0, {self.class_count})")
        if not np.all(np.isfinite(x)):
            raise InvalidArgumentError("特征含有非有限值")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def size(self) -> int:
        return int(self.y.size)

    @property
    def dims(self) -> int:
        return int(self.x.shape[1])

    def take(self, index: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """按索引取一个小批量 (x, y)."""
        return self.x[index], self.y[index]

    def subset(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.x[index], self.y[index], self.class_count)

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        """按顺序拼接，行号依次排列."""
        if not parts:
            raise InvalidArgumentError("没有可拼接的数据集")
        if len({(p.dims, p.class_count) for p in parts}) != 1:
            raise InvalidArgumentError("拼接的数据集维度或类别数不一致")
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            parts[0].class_count,
        )

    def class_pool(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.y == label)


@dataclass(frozen=True, eq=False)
class ClientShard:
    """单个客户端的训练/测试数据."""

    client_id: int
    train: Dataset
    test: Dataset
    label_set: FrozenSet[int]
    train_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        object.__setattr__(self, "label_set", frozenset(int(c) for c in self.label_set))
        for name, part in (("train", self.train), ("test", self.test)):
            stray = set(np.unique(part.y).tolist()) - self.label_set
            if stray:
                raise InvalidArgumentError(
                    f"客户端 {self.client_id} 的 {name} 集含有未分配的标签 {sorted(stray)}"
                )


@dataclass(frozen=True)
class RegressionData:
    """回归数据：观测 y = f_true + 噪声."""

    x: np.ndarray
    y: np.ndarray
    f_true: np.ndarray
    noise_std: float


def _open_binary(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(handle, size: int, path: Path, what: str) -> bytes:
    data = handle.read(size)
    if len(data) != size:
        raise FormatError(f"{path} 被截断: {what} 需要 {size} 字节，实际 {len(data)}")
    return data


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """读取大端 IDX 图像/标签文件，像素缩放到 [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    for path in (images_path, labels_path):
        if not path.exists():
            raise FileNotFoundError(f"数据文件不存在: {path}")

    with _open_binary(images_path) as handle:
        (magic,) = struct.unpack(">I", _read_exact(handle, 4, images_path, "magic"))
        if magic != IMAGE_MAGIC:
            raise FormatError(f"{images_path} 的 magic 为 0x{magic:08x}，应为 0x{IMAGE_MAGIC:08x}")
        count, rows, cols = struct.unpack(">III", _read_exact(handle, 12, images_path, "维度"))
        pixels = _read_exact(handle, count * rows * cols, images_path, "像素")

    with _open_binary(labels_path) as handle:
        (magic,) = struct.unpack(">I", _read_exact(handle, 4, labels_path, "magic"))
        if magic != LABEL_MAGIC:
            raise FormatError(f"{labels_path} 的 magic 为 0x{magic:08x}，应为 0x{LABEL_MAGIC:08x}")
        (label_count,) = struct.unpack(">I", _read_exact(handle, 4, labels_path, "维度"))
        labels = _read_exact(handle, label_count, labels_path, "标签")

    if count != label_count:
        raise FormatError(f"图像数 {count} 与标签数 {label_count} 不一致")

    x = np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows * cols) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    logger.info(f"已读取 {images_path.name}: {count} 张 {rows}x{cols} 图像")
    return Dataset(x, y, class_count)


def _draw(pool: np.ndarray, count: Optional[int], rng: np.random.Generator, label: int) -> np.ndarray:
    if count is None:
        return rng.permutation(pool)
    if count > pool.size:
        raise AllocationError(f"类别 {label} 的样本池只有 {pool.size} 个，无法抽取 {count} 个")
    return rng.choice(pool, size=count, replace=False)


def _check_partition_args(ds_train: Dataset, ds_test: Dataset, labels_per_client: int) -> None:
    if ds_train.class_count != ds_test.class_count:
        raise InvalidArgumentError("训练集与测试集的类别数不一致")
    if not 1 <= labels_per_client <= ds_train.class_count:
        raise InvalidArgumentError(
            f"labels_per_client={labels_per_client} 超出 [1, {ds_train.class_count}]"
        )


def _draw_client(
    ds_train: Dataset,
    ds_test: Dataset,
    client_id: int,
    labels_per_client: int,
    seed: int,
    train_per_class: Optional[int],
    test_per_class: Optional[int],
    exclude: Optional[np.ndarray],
) -> ClientShard:
    shared_pool = ds_test is ds_train
    rng = np.random.default_rng(derive_seed(seed, "partition", client_id))
    labels = np.sort(rng.choice(ds_train.class_count, size=labels_per_client, replace=False))
    train_parts, test_parts = [], []
    for label in labels:
        label = int(label)
        pool = ds_train.class_pool(label)
        if exclude is not None:
            pool = np.setdiff1d(pool, exclude, assume_unique=True)
        if shared_pool:
            drawn = _draw(pool, train_per_class + test_per_class, rng, label)
            train_parts.append(drawn[:train_per_class])
            test_parts.append(drawn[train_per_class:])
        else:
            train_parts.append(_draw(pool, train_per_class, rng, label))
            test_parts.append(_draw(ds_test.class_pool(label), test_per_class, rng, label))
    train_index = np.concatenate(train_parts).astype(np.int64)
    test_index = np.concatenate(test_parts).astype(np.int64)
    return ClientShard(
        client_id=client_id,
        train=ds_train.subset(train_index),
        test=ds_test.subset(test_index),
        label_set=frozenset(int(c) for c in labels),
        train_index=train_index,
        test_index=test_index,
    )


def partition_label_skew(
    ds_train: Dataset,
    ds_test: Dataset,
    N: int,
    labels_per_client: int,
    seed: int,
    train_per_class: Optional[int] = None,
    test_per_class: Optional[int] = None,
    exclude: Optional[np.ndarray] = None,
) -> List[ClientShard]:
    """每个客户端随机分配 labels_per_client 个类别，并从类别样本池中抽样.

    样本池在客户端之间复用；同一客户端内不放回抽样。若训练集与测试集是
    同一个 Dataset，则同一客户端的训练/测试样本从同一池中联合抽取，互不重叠。
    每类计数为 None 时取整个样本池。exclude 中的行号不会分给任何客户端，
    只能和共用样本池一起使用。
    """
    if N < 1:
        raise InvalidArgumentError(f"客户端数必须 >= 1，实际为 {N}")
    _check_partition_args(ds_train, ds_test, labels_per_client)
    shared_pool = ds_test is ds_train
    if shared_pool and (train_per_class is None or test_per_class is None):
        raise InvalidArgumentError("训练/测试共用样本池时必须给出每类计数")
    if exclude is not None and not shared_pool:
        raise InvalidArgumentError("exclude 只适用于训练/测试共用的样本池")
    if exclude is not None:
        exclude = np.unique(np.asarray(exclude, dtype=np.int64))

    shards = [
        _draw_client(
            ds_train, ds_test, client_id, labels_per_client, seed, train_per_class, test_per_class, exclude
        )
        for client_id in range(N)
    ]
    logger.info(f"标签倾斜划分完成: {N} 个客户端，每个 {labels_per_client} 个类别")
    return shards


def draw_novel_shard(
    pool: Dataset,
    client_id: int,
    labels_per_client: int,
    seed: int,
    train_per_class: int,
    test_per_class: int,
) -> ClientShard:
    """为新客户端从 pool 中联合抽取互不重叠的训练/测试样本.

    抽样流按 client_id 派生，和训练客户端的流互不相同。
    """
    _check_partition_args(pool, pool, labels_per_client)
    return _draw_client(pool, pool, client_id, labels_per_client, seed, train_per_class, test_per_class, None)


def shard_rows(shard: ClientShard) -> np.ndarray:
    """客户端占用的样本池行号（训练与测试）."""
    return np.concatenate([shard.train_index, shard.test_index])


def split_counts(regime: SizeRegime, dataset_kind: str) -> Tuple[int, int]:
    kind = "cifar" if dataset_kind in ("cifar", DatasetKind.SYNTH.value) else dataset_kind
    key = (kind, SizeRegime(regime).value)
    if key not in SPLIT_COUNTS:
        raise InvalidArgumentError(f"未知的数据集类型: {dataset_kind}")
    return SPLIT_COUNTS[key]


def _trim(part: Dataset, index: np.ndarray, labels, count: int, client_id: int, name: str):
    keep = []
    for label in sorted(labels):
        rows = np.flatnonzero(part.y == label)
        if rows.size < count:
            raise AllocationError(
                f"客户端 {client_id} 的 {name} 集类别 {label} 只有 {rows.size} 个样本，需要 {count} 个"
            )
        keep.append(rows[:count])
    keep = np.concatenate(keep) if keep else np.zeros(0, dtype=np.int64)
    source = index[keep] if index.size else index
    return part.subset(keep), source


def split_small_large(
    shards: Sequence[ClientShard], regime: SizeRegime, dataset_kind: str
) -> List[ClientShard]:
    """按小/大样本量方案把每个客户端裁成每类固定的训练/测试数量."""
    train_count, test_count = split_counts(regime, dataset_kind)
    resized = []
    for shard in shards:
        train, train_index = _trim(
            shard.train, shard.train_index, shard.label_set, train_count, shard.client_id, "训练"
        )
        test, test_index = _trim(
            shard.test, shard.test_index, shard.label_set, test_count, shard.client_id, "测试"
        )
        resized.append(
            ClientShard(
                client_id=shard.client_id,
                train=train,
                test=test,
                label_set=shard.label_set,
                train_index=train_index,
                test_index=test_index,
            )
        )
    return resized


def _class_means(dims: int, classes: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """类别均值位于缩放后的单纯形顶点上."""
    if dims >= classes:
        return separation * np.eye(classes, dims)
    directions = rng.standard_normal((classes, dims))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return separation * directions


def synth_classification(
    n_per_class: int,
    dims: int,
    classes: int,
    client_shift: Optional[np.ndarray] = None,
    seed: int = 0,
    separation: float = 3.0,
    stream: str = "samples",
) -> Dataset:
    """单位协方差的高斯团，每类一个.

    client_shift 为 (dims,) 时整体平移，为 (classes, dims) 时按类别平移。
    类别均值只由 seed 决定；换一个 stream 得到同分布的另一批样本。
    """
    if dims < 1 or classes < 1 or n_per_class < 0:
        raise InvalidArgumentError(
            f"非法参数: n_per_class={n_per_class}, dims={dims}, classes={classes}"
        )
    if separation < 0:
        raise InvalidArgumentError("separation 必须非负")
    means = _class_means(dims, classes, separation, np.random.default_rng(derive_seed(seed, "means")))
    if client_shift is not None:
        shift = np.asarray(client_shift, dtype=np.float64)
        if shift.shape not in ((dims,), (classes, dims)):
            raise InvalidArgumentError(f"client_shift 形状 {shift.shape} 非法")
        means = means + shift

    rng = np.random.default_rng(derive_seed(seed, stream))
    y = np.repeat(np.arange(classes), n_per_class)
    x = means[y] + rng.standard_normal((y.size, dims))
    return Dataset(x, y, classes)


def synth_regression(n: int, dims: int, seed: int = 0, noise_std: float = 1.0) -> RegressionData:
    """回归数据，f_true(x) = sin(x . w) + 0.5 * (x . v)，噪声标准差 noise_std."""
    if n < 1 or dims < 1:
        raise InvalidArgumentError(f"非法参数: n={n}, dims={dims}")
    if noise_std <= 0:
        raise InvalidArgumentError("noise_std 必须为正")
    rng = np.random.default_rng(derive_seed(seed, "regression"))
    w = rng.standard_normal(dims)
    v = rng.standard_normal(dims) / np.sqrt(dims)
    x = rng.uniform(-1.0, 1.0, size=(n, dims))
    f_true = np.sin(x @ w) + 0.5 * (x @ v)
    y = f_true + noise_std * rng.standard_normal(n)
    return RegressionData(x=x, y=y, f_true=f_true, noise_std=noise_std)


def write_csv(ds: Dataset, path) -> Path:
    """导出为 CSV：表头一行，标签列在最后."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([f"x{k}" for k in range(ds.dims)] + ["label"])
        for row, label in zip(ds.x, ds.y):
            writer.writerow([format(value, ".17g") for value in row] + [int(label)])
    return path


def _idx_path(data_dir: Path, name: str) -> Path:
    plain = data_dir / name
    if plain.exists():
        return plain
    packed = data_dir / f"{name}.gz"
    if packed.exists():
        return packed
    raise FileNotFoundError(f"数据文件不存在: {plain}(.gz)")


def load_source(cfg: RunConfig) -> Dataset:
    """按配置读取或生成样本池.

    mnist/fmnist 把训练文件和 t10k 文件拼成一个 70,000 张的池，各客户端的
    训练/测试样本都从这个池中联合抽取。
    """
    if cfg.dataset == DatasetKind.SYNTH:
        return synth_classification(
            cfg.synth_pool,
            cfg.synth_dims,
            cfg.synth_classes,
            seed=cfg.seed,
            separation=cfg.synth_separation,
        )

    data_dir = Path(cfg.data_dir) / cfg.dataset.value
    parts = [
        load_idx(_idx_path(data_dir, images), _idx_path(data_dir, labels))
        for images, labels in (IDX_FILES["train"], IDX_FILES["test"])
    ]
    return Dataset.concat(parts)


def _novel_pool(cfg: RunConfig, pool: Dataset) -> Tuple[Dataset, bool]:
    """新客户端的样本池，以及它是否与训练客户端共用 pool.

    合成数据重新抽一批同分布的样本；IDX 数据从同一个池里先抽，再把这些行排除。
    """
    if cfg.dataset == DatasetKind.SYNTH:
        fresh = synth_classification(
            cfg.synth_pool,
            cfg.synth_dims,
            cfg.synth_classes,
            seed=cfg.seed,
            separation=cfg.synth_separation,
            stream="novel",
        )
        return fresh, False
    return pool, True


def build_client_shards(cfg: RunConfig) -> Tuple[List[ClientShard], Optional[ClientShard]]:
    """读取/生成数据 → 标签倾斜划分 → 小/大切分；可选地多划一个新客户端.

    新客户端的样本与所有训练客户端的样本互不重叠。
    """
    pool = load_source(cfg)
    train_count, test_count = split_counts(cfg.size, cfg.dataset.value)

    novel, exclude = None, None
    if cfg.novel_client:
        novel_pool, shares_pool = _novel_pool(cfg, pool)
        novel = draw_novel_shard(
            novel_pool, cfg.clients, cfg.labels_per_client, cfg.seed, train_count, test_count
        )
        if shares_pool:
            exclude = shard_rows(novel)
        logger.info(f"新客户端 {novel.client_id} 的类别 {sorted(novel.label_set)}")

    shards = partition_label_skew(
        pool,
        pool,
        cfg.clients,
        cfg.labels_per_client,
        cfg.seed,
        train_per_class=train_count,
        test_per_class=test_count,
        exclude=exclude,
    )
    shards = split_small_large(shards, cfg.size, cfg.dataset.value)
    if novel is not None:
        novel = split_small_large([novel], cfg.size, cfg.dataset.value)[0]
    return shards, novel
