"""Hierarchical, uniqueness-aware region captioning over SA-1B style masks."""

from .encoder import SplitConfig, encode_mask, load_weights, seeded_weights, split_mask
from .grouping import SimilarityParams, group_similar
from .masks import BinaryMask, RleMask, area, containment, iou, rle_decode, rle_encode
from .metrics import bleu, meteor, rouge_l, tokenize
from .pipeline import CaptionRecord, Clients, PipelineConfig, run_pipeline
from .render import RenderParams, render_set_of_mark, render_stage2_views, render_stage3_view
from .sa1b import ImageEntry, load_entry
from .tree import MaskTree, TreeParams, bottomup_order, build_tree, main_objects, topdown_order

__version__ = "0.1.0"
