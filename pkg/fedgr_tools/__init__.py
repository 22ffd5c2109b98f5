# -*- coding: utf-8 -*-
__version__ = "0.1"
from fedgr_tools.utils import *
from fedgr_tools.nn import *
from fedgr_tools.datagen import *
from fedgr_tools.noise_model import *
from fedgr_tools.metrics import *
from fedgr_tools.config import *
from fedgr_tools.train import *
from fedgr_tools.federation import *
