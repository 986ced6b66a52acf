import os
from dotenv import load_dotenv

load_dotenv()

basedir = os.path.abspath(os.path.dirname(__file__))


class Config:
    SEED = int(os.getenv("CONETEST_SEED", "0"))
    MONTE_CARLO_SIZE = int(os.getenv("CONETEST_M", "5000"))
    BOOTSTRAP_SIZE = int(os.getenv("CONETEST_B", "1000"))
    WORKERS = int(os.getenv("CONETEST_WORKERS", "1"))
    LOG_LEVEL = os.getenv("CONETEST_LOG_LEVEL", "INFO")

    # Bundled datasets and fit summaries
    DATA_DIR = os.getenv("CONETEST_DATA_DIR", os.path.join(basedir, "data"))
    LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
