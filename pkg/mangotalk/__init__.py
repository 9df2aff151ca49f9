"""MangoTalk - Conversational 3D talking heads driven by dual-speaker audio."""

from mangotalk.dataset import DialogueDataset
from mangotalk.io import DialogueClip
from mangotalk.morphable import MorphableModel, decode
from mangotalk.motion import MotionSequence, ShapeParams
import mangotalk.metrics
import mangotalk.motiongen
import mangotalk.renderer


__license__ = "MIT"
__version__ = "0.1.0"
