import os
from dotenv import load_dotenv
load_dotenv()
MAX_CONCURRENT_THREADS = int(os.getenv("MAX_CONCURRENT_THREADS", 4))
FULL_LOGGING = bool(os.getenv("FULL_LOGGING") == "True" or False)
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()

# output directory override; all other run settings come from the JSON config
DSD_OUT_DIR = os.getenv("DSD_OUT_DIR")
