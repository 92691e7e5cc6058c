"""Defense implementations behind one interface: image -> label or null."""

from .base import NULL_LABEL, Defense, StubDefense, VanillaDefense
from .bart import BartDefense, barrage_images, fit_bart, random_chain
from .buzz import BuzzDefense, BuzzMember, SecretTransform, fit_buzz, unanimous_or_null
from .distc import DistcDefense, fit_distc, kde_features, random_resize_pad
from .ecoc import (Codebook, EcocEnsemble, ecoc_decode, fit_ecoc,
                   generate_codebook, nearest_codeword)
from .fd import FdDefense, fd_grid_search, fd_preprocess
from .kwta import KwtaDefense, fit_kwta
from .odds import OddsDefense, OddsStatistics, odds_classify, odds_fit
from .transforms import CATALOG, transform_catalog_apply, usable_transforms

__all__ = [
    "NULL_LABEL", "Defense", "StubDefense", "VanillaDefense",
    "BartDefense", "barrage_images", "fit_bart", "random_chain",
    "BuzzDefense", "BuzzMember", "SecretTransform", "fit_buzz", "unanimous_or_null",
    "DistcDefense", "fit_distc", "kde_features", "random_resize_pad",
    "Codebook", "EcocEnsemble", "ecoc_decode", "fit_ecoc",
    "generate_codebook", "nearest_codeword",
    "FdDefense", "fd_grid_search", "fd_preprocess",
    "KwtaDefense", "fit_kwta",
    "OddsDefense", "OddsStatistics", "odds_classify", "odds_fit",
    "CATALOG", "transform_catalog_apply", "usable_transforms",
]
