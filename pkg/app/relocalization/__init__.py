"""Point/line scene-coordinate regression and pose estimation."""
