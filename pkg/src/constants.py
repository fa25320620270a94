from dataclasses import dataclass, field


@dataclass
class Config:
    RUN_CONFIG_FILENAME: str = "config.txt"
    DEFAULT_ENCODING: str = "utf-8"

    TENSOR_MAGIC: bytes = b"PSF1"
    PIXEL_MAXVAL: int = 255

    DEFAULT_ARCHITECTURE: str = "conv3x16r,pool2,conv3x32r,pool2,conv3x64r"
    DEFAULT_FEATURE_DIM: int = 64
    DEFAULT_INPUT_SIZE: int = 64

    SOLVER_TOL: float = 1e-6
    SOLVER_MAX_ITER: int = 10000
    ARMIJO_CONSTANT: float = 1e-4

    DEFAULT_PART_COUNT: int = 4
    MIN_BOX_SIDE: int = 8
    MIN_NMS_RADIUS: int = 3
    OTSU_LEVELS: int = 256
    LLOYD_MAX_ITER: int = 100
    CLUSTER_FEATURES: int = 6

    BUNDLE_FILES: dict[str, str] = field(
        default_factory=lambda: {
            "backbone": "backbone.psf",
            "architecture": "backbone.arch",
            "selection": "selection.psf",
            "selection_meta": "selection.meta",
            "final": "final.psf",
            "final_meta": "final.meta",
            "final_no_fs": "final_no_fs.psf",
            "final_no_fs_meta": "final_no_fs.meta",
        }
    )

    EXIT_OK: int = 0
    EXIT_USAGE: int = 1
    EXIT_DATA: int = 2
    EXIT_NUMERIC: int = 3


config = Config()
