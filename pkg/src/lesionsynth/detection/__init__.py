from .augment import CDAParams, CDASample, apply_cda
from .candidates import Candidate, extract_candidate_patch, propose_candidates
from .classifier import ClassifierConfig, PatchClassifier, train_classifier
from .frst import BACKEND, FRSTParams, frst3d
from .pipeline import Detection, detect
