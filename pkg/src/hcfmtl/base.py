from pydantic import BaseModel, ConfigDict


class StrictModel(BaseModel):
    """Immutable config record; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)
