import os
import inspect
import logging
import json
from colorama import Fore, Style, init
from datetime import datetime
from dotenv import load_dotenv

init(autoreset=True)  # Automatically reset color formatting after each log
                      # Allowing different logs to have different colors

load_dotenv()  # S2D_LOG_DIR / S2D_LOG_LEVEL / S2D_LOG_FILE can live in a local .env

LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def render_message(msg):
    """Console form of our {"timestamp", "msg", "data"} records: `msg | data`, timestamp dropped."""
    if not isinstance(msg, dict):
        return str(msg)
    text = str(msg.get("msg", ""))
    data = msg.get("data")
    if data not in (None, ""):
        text += " | " + (json.dumps(data, default=str, sort_keys=True) if isinstance(data, (dict, list)) else str(data))
    return text


# Custom logging formatter to add colors and formatting based on log level
class ColorFormatter(logging.Formatter):
    # checkout Colorama's available Fore (colors) and Styles https://github.com/tartley/colorama

    COLORS = {
        logging.DEBUG: Fore.BLUE,
        logging.INFO: Fore.GREEN,
        logging.ERROR: Fore.RED,
        logging.WARNING: Fore.YELLOW
    }
    FILE_COLOR = Fore.CYAN + Style.BRIGHT  # Filename and line number in bright cyan
    MESSAGE_COLOR_BY_FILE = {}  # per-file message color, filled by set_files_message_color

    def format(self, record):
        log_color = self.COLORS.get(record.levelno, Style.RESET_ALL)
        levelname = f"{log_color}{record.levelname}{Style.RESET_ALL}"
        filename_lineno = f"{self.FILE_COLOR}{record.filename}:{record.lineno:<5}{Style.RESET_ALL}"
        message_color = self.MESSAGE_COLOR_BY_FILE.get(record.filename, Style.RESET_ALL)
        return f"{levelname}:     {filename_lineno} - {message_color}{render_message(record.msg)}{Style.RESET_ALL}"


class JSONFormatter(logging.Formatter):
    def format(self, record):
        # dict records stay objects in the file, everything else is a plain string
        message = record.msg if isinstance(record.msg, dict) else record.getMessage()
        log_record = {
            "level": record.levelname,
            "timestamp": datetime.fromtimestamp(record.created).isoformat(),
            "filename": record.filename,
            "line": record.lineno,
            "message": message
        }
        return json.dumps(log_record, default=str)


def resolve_level(name):
    """Level name from S2D_LOG_LEVEL; anything unknown falls back to INFO."""
    name = (name or "INFO").strip().upper()
    return name if name in LEVELS else "INFO"


def attach_file_handler(logger, logs_dir):
    """Adds a JSON-lines file handler under `logs_dir`, one file per process. Returns the file path."""
    os.makedirs(logs_dir, exist_ok=True)
    log_file = os.path.join(logs_dir, f'{datetime.now().strftime("%Y-%m-%d_%H-%M-%S")}_{os.getpid()}.log')
    file_handler = logging.FileHandler(log_file)
    file_handler.setFormatter(json_formatter)
    logger.addHandler(file_handler)
    return log_file


log_formatter = ColorFormatter()
json_formatter = JSONFormatter()
# stderr as it is at import, so redirected stderr in the CLI only ever sees the error line
streamHandler = logging.StreamHandler()
streamHandler.setFormatter(log_formatter)

logger = logging.getLogger("s2d")
logger.setLevel(resolve_level(os.getenv("S2D_LOG_LEVEL")))
logger.propagate = False
if not logger.handlers:
    logger.addHandler(streamHandler)
    if os.getenv("S2D_LOG_FILE", "1") != "0":
        path = attach_file_handler(logger, os.getenv("S2D_LOG_DIR", os.path.join(os.path.dirname(__file__), 'logs')))
        logger.debug(f"saving logs to {path} and streaming to console")

# plotting and geometry libraries are chatty at DEBUG
logging.getLogger("matplotlib").setLevel(logging.WARNING)
logging.getLogger("shapely").setLevel(logging.WARNING)

# Map string color names to `colorama.Fore` attributes
COLOR_MAP = {
    "RED": Fore.RED,
    "GREEN": Fore.GREEN,
    "YELLOW": Fore.YELLOW,
    "PURPLE": Fore.BLUE,
    "MAGENTA": Fore.MAGENTA,
    "CYAN": Fore.CYAN,
    "WHITE": Fore.WHITE,
    "RESET": Style.RESET_ALL
}


def set_files_message_color(color_name):
    """Sets the message color for the calling module's log lines."""
    caller_filename = os.path.basename(inspect.stack()[1].filename)
    color = COLOR_MAP.get(color_name.upper(), Style.RESET_ALL)
    if log_formatter.MESSAGE_COLOR_BY_FILE.get(caller_filename) == color:
        return
    log_formatter.MESSAGE_COLOR_BY_FILE[caller_filename] = color
    logger.debug(f"Set message color for {caller_filename} to {color_name.upper()}")
