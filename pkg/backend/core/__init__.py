# Pipeline stages and shared numerical core
