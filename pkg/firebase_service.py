"""
Firebase Service for storing experiments started through the API
Uses Firebase Firestore (NoSQL database): one document per experiment in the
`experiments` collection, comparison rows in its `results` subcollection.
"""

import asyncio
import json
import os
from datetime import datetime
from typing import Any, Callable, Dict, List, Optional

import firebase_admin
from dotenv import load_dotenv
from firebase_admin import credentials, firestore
from loguru import logger

import config

load_dotenv()

_AUTH_ERRORS = ("Invalid JWT Signature", "invalid_grant")


class FirebaseService:
    """
    Service for interacting with Firebase Firestore.
    Stores experiment metadata, status and comparison rows.

    Without credentials the service stays uninitialized: writes are skipped
    and reads come back empty.
    """

    def __init__(self, db: Optional[Any] = None):
        self.db = db
        self._initialized = db is not None
        if db is None:
            self._initialize_firebase()

    def _initialize_firebase(self):
        """Initialize the Firebase Admin SDK from a key file, a JSON env var or default credentials"""
        try:
            if not firebase_admin._apps:
                cred = self._load_credentials()
                if cred is not None:
                    firebase_admin.initialize_app(cred)
                elif os.environ.get("GOOGLE_APPLICATION_CREDENTIALS") or os.environ.get("GOOGLE_CLOUD_PROJECT"):
                    # Google Cloud environments
                    firebase_admin.initialize_app()
                    logger.info("Firebase initialized with default credentials")
                else:
                    logger.warning(
                        f"Firebase not configured; experiments will not be saved. Set "
                        f"{config.ENV_FIREBASE_SERVICE_ACCOUNT_PATH} or {config.ENV_FIREBASE_SERVICE_ACCOUNT_JSON}"
                    )
                    return

            self.db = firestore.client()
            self._initialized = True
            logger.info("Firebase Firestore client initialized successfully")
        except Exception as e:
            logger.warning(f"Could not initialize Firebase: {e}")
            self.db = None
            self._initialized = False

    @staticmethod
    def _load_credentials() -> Optional[credentials.Certificate]:
        service_account_path = os.environ.get(config.ENV_FIREBASE_SERVICE_ACCOUNT_PATH)
        if service_account_path:
            if os.path.exists(service_account_path):
                logger.info(f"Firebase initialized from file: {service_account_path}")
                return credentials.Certificate(service_account_path)
            logger.warning(f"Firebase key file not found: {service_account_path}")

        service_account_json = os.environ.get(config.ENV_FIREBASE_SERVICE_ACCOUNT_JSON, "").strip()
        if service_account_json:
            try:
                cred_dict = json.loads(service_account_json)
            except json.JSONDecodeError as e:
                logger.error(f"Error parsing {config.ENV_FIREBASE_SERVICE_ACCOUNT_JSON} at position {e.pos}: {e.msg}")
                return None
            missing = [f for f in ("type", "project_id", "private_key", "client_email") if f not in cred_dict]
            if missing:
                logger.error(f"Missing required fields in Firebase JSON: {missing}")
                return None
            logger.info(f"Firebase JSON parsed. Project: {cred_dict['project_id']}")
            return credentials.Certificate(cred_dict)
        return None

    @property
    def available(self) -> bool:
        return self.db is not None and self._initialized

    def _experiment_ref(self, experiment_id: str):
        return self.db.collection(config.EXPERIMENTS_COLLECTION).document(experiment_id)

    def _results_ref(self, experiment_id: str):
        return self._experiment_ref(experiment_id).collection(config.RESULTS_COLLECTION)

    async def _read(self, what: str, fetch: Callable[[], Any], default: Any) -> Any:
        """Run a blocking Firestore read in the executor with a timeout"""
        try:
            loop = asyncio.get_running_loop()
            return await asyncio.wait_for(
                loop.run_in_executor(None, fetch), timeout=config.FIRESTORE_READ_TIMEOUT_S
            )
        except asyncio.TimeoutError:
            logger.warning(f"Timeout {what} from Firebase ({config.FIRESTORE_READ_TIMEOUT_S:.0f}s)")
            return default
        except Exception as e:
            logger.error(f"Error {what}: {e}")
            if any(marker in str(e) for marker in _AUTH_ERRORS):
                logger.error("Firebase authentication failed - disabling Firebase")
                self._initialized = False
                self.db = None
            return default

    async def save_experiment_metadata(self, experiment_id: str, metadata: Dict[str, Any]):
        """Save experiment metadata; experiment_id, status and created_at are expected"""
        if not self.available:
            logger.debug("Firebase not available, skipping metadata save")
            return

        for field in ("experiment_id", "status", "created_at"):
            if field not in metadata:
                logger.warning(f"Missing field '{field}' in metadata for {experiment_id}")

        self._experiment_ref(experiment_id).set(self._clean_dict_for_firestore(metadata), merge=False)
        logger.debug(f"Experiment metadata saved: {experiment_id}")

    async def save_experiment_results(self, experiment_id: str, rows: List[Dict[str, Any]]):
        """Save comparison rows in order; each gets a row_index to page by"""
        if not self.available:
            logger.debug("Firebase not available, skipping results save")
            return
        if not rows:
            logger.warning(f"No results to save for experiment {experiment_id}")
            return

        results_ref = self._results_ref(experiment_id)
        batch = self.db.batch()
        saved_at = datetime.now().isoformat()
        for i, row in enumerate(rows):
            document = dict(row, row_index=i, experiment_id=experiment_id, saved_at=saved_at)
            batch.set(results_ref.document(f"row_{i:03d}"), self._clean_dict_for_firestore(document))
            # Firestore caps a batch at 500 writes
            if (i + 1) % config.FIRESTORE_BATCH_LIMIT == 0:
                batch.commit()
                batch = self.db.batch()
        if len(rows) % config.FIRESTORE_BATCH_LIMIT != 0:
            batch.commit()
        logger.info(f"Saved {len(rows)} comparison rows for experiment {experiment_id}")

    def _clean_dict_for_firestore(self, data: Dict[str, Any]) -> Dict[str, Any]:
        """Keep Firestore-compatible values; None stays as a null field"""
        cleaned = {}
        for key, value in data.items():
            if value is None or isinstance(value, (str, int, float, bool)):
                cleaned[key] = value
            elif isinstance(value, dict):
                cleaned[key] = self._clean_dict_for_firestore(value)
            elif isinstance(value, (list, tuple)):
                cleaned[key] = [self._clean_dict_for_firestore(v) if isinstance(v, dict) else v for v in value]
            else:
                cleaned[key] = str(value)
        return cleaned

    async def update_experiment_status(
        self, experiment_id: str, status: str, seeds_done: int, error: Optional[str] = None
    ):
        if not self.available:
            return

        update_data: Dict[str, Any] = {
            "status": status,
            "seeds_done": seeds_done,
            "updated_at": datetime.now().isoformat(),
        }
        if error:
            update_data["error"] = error
        try:
            self._experiment_ref(experiment_id).update(update_data)
        except Exception as e:
            logger.error(f"Error updating experiment status: {e}")

    async def get_experiment_status(self, experiment_id: str) -> Optional[Dict[str, Any]]:
        """Experiment metadata, or None when unknown or Firebase is unavailable"""
        if not self.available:
            return None

        def get_doc():
            doc = self._experiment_ref(experiment_id).get()
            return doc.to_dict() if doc.exists else None

        return await self._read("getting experiment status", get_doc, None)

    async def get_experiment_results(self, experiment_id: str, limit: int = 100, offset: int = 0) -> List[Dict[str, Any]]:
        """Comparison rows in saved order, with pagination"""
        if not self.available:
            return []

        def get_results():
            query = (
                self._results_ref(experiment_id)
                .order_by("row_index", direction=firestore.Query.ASCENDING)
                .offset(offset)
                .limit(limit)
            )
            return [doc.to_dict() for doc in query.stream()]

        return await self._read("getting experiment results", get_results, [])

    async def list_recent_experiments(self, limit: int = 20) -> List[Dict[str, Any]]:
        if not self.available:
            logger.debug("Firebase not available, returning empty list")
            return []

        def get_docs():
            query = (
                self.db.collection(config.EXPERIMENTS_COLLECTION)
                .order_by("created_at", direction=firestore.Query.DESCENDING)
                .limit(limit)
            )
            return [doc.to_dict() for doc in query.stream()]

        return await self._read("listing experiments", get_docs, [])

    async def delete_experiment(self, experiment_id: str) -> bool:
        """Delete an experiment and all its rows. Returns False when it does not exist"""
        if not self.available:
            return False

        experiment_ref = self._experiment_ref(experiment_id)
        if not experiment_ref.get().exists:
            return False

        batch = self.db.batch()
        count = 0
        for doc in self._results_ref(experiment_id).stream():
            batch.delete(doc.reference)
            count += 1
            if count % config.FIRESTORE_BATCH_LIMIT == 0:
                batch.commit()
                batch = self.db.batch()
        if count % config.FIRESTORE_BATCH_LIMIT != 0:
            batch.commit()

        experiment_ref.delete()
        logger.info(f"Deleted experiment {experiment_id} ({count} rows)")
        return True
