import logging
import os
from datetime import datetime

from dotenv import load_dotenv
from rich.logging import RichHandler

load_dotenv()

log_file_name = f"{datetime.now().strftime('%m_%d_%Y_%H_%M_%S')}.log"

log_dir_path = os.getenv("CRAFT_LOG_DIR", os.path.join(os.getcwd(), "logs"))
os.makedirs(log_dir_path, exist_ok=True)

log_file_path = os.path.join(log_dir_path, log_file_name)

file_handler = logging.FileHandler(log_file_path)
file_handler.setFormatter(
    logging.Formatter("[%(asctime)s] %(lineno)d %(name)s - %(levelname)s - %(message)s")
)

console_handler = RichHandler(show_path=False, markup=False)
console_handler.setFormatter(logging.Formatter("%(name)s - %(message)s"))

logging.basicConfig(
    level=os.getenv("CRAFT_LOG_LEVEL", "INFO").upper(),
    handlers=[file_handler, console_handler],
)
