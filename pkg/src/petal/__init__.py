"""Parameter-efficient tuning mechanisms on a toy Q-Former."""
