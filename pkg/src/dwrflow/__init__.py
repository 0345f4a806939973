"""Goal-oriented DWR adaptation for 2D steady Euler."""
