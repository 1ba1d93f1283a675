from enum import Enum

from pydantic import BaseModel, Extra, Field


class GANMode(Enum):
    VANILLA_LOG = "VANILLA_LOG"
    LEAST_SQUARES = "LEAST_SQUARES"


class LossWeights(BaseModel):
    lambda_l1: float = Field(100.0, ge=0.0)
    lambda_gc: float = Field(1.0, ge=0.0)
    lambda_fm: float = Field(10.0, ge=0.0)
    gan_mode: GANMode = GANMode.VANILLA_LOG
    # Literal reading: gc = ncc_x + ncc_y instead of 2 - ncc_x - ncc_y
    gc_literal_sign: bool = False

    class Config:
        extra = Extra.forbid


class LossReport(BaseModel):
    gan_g: float
    gan_d: float
    fm: float
    l1: float
    gc: float
    total_g: float

    class Config:
        extra = Extra.forbid
