//! Registered tables and models.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use parking_lot::RwLock;

use crate::error::{Error, Result};
use crate::model::{Manifest, Model};
use crate::relational::{BufferPool, RowRelation, StoredTable};

#[derive(Default)]
pub struct Catalog {
    tables: RwLock<BTreeMap<String, Arc<StoredTable>>>,
    models: RwLock<BTreeMap<String, Arc<Model>>>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_table(&self, name: &str, table: StoredTable) -> Result<()> {
        check_name(name)?;
        let mut tables = self.tables.write();
        if tables.contains_key(name) {
            return Err(Error::invalid(format!("table `{name}` already exists")));
        }
        tables.insert(name.to_string(), Arc::new(table));
        Ok(())
    }

    /// Stores `rel` through the pool and registers it.
    pub fn create_table(&self, pool: &Arc<BufferPool>, name: &str, rel: &RowRelation) -> Result<()> {
        check_name(name)?;
        if self.tables.read().contains_key(name) {
            return Err(Error::invalid(format!("table `{name}` already exists")));
        }
        self.register_table(name, StoredTable::store(pool, rel)?)
    }

    pub fn table(&self, name: &str) -> Result<Arc<StoredTable>> {
        self.tables
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("table `{name}`")))
    }

    pub fn table_names(&self) -> Vec<String> {
        self.tables.read().keys().cloned().collect()
    }

    pub fn drop_table(&self, name: &str) -> Result<()> {
        self.tables
            .write()
            .remove(name)
            .map(|_| ())
            .ok_or_else(|| Error::NotFound(format!("table `{name}`")))
    }

    /// Registers a model's metadata without weights.
    pub fn create_model(&self, name: &str, metadata: &str) -> Result<Arc<Model>> {
        check_name(name).map_err(|e| Error::load(None, "name", e.to_string()))?;
        let mut manifest = Manifest::parse(metadata)?;
        manifest.name = name.to_string();
        let model = Arc::new(Model::from_manifest(&manifest, None)?);
        let mut models = self.models.write();
        if models.contains_key(name) {
            return Err(Error::load(None, "name", format!("model `{name}` already exists")));
        }
        models.insert(name.to_string(), Arc::clone(&model));
        Ok(model)
    }

    /// Loads a manifest and its weights under `name`. A model created
    /// earlier with [`Catalog::create_model`] must have the same layers.
    pub fn load_model(&self, name: &str, manifest: &Path) -> Result<Arc<Model>> {
        check_name(name).map_err(|e| Error::load(None, "name", e.to_string()))?;
        let mut model = Model::load(manifest)?;
        model.name = name.to_string();
        self.insert_loaded(model)
    }

    /// Registers an in-memory model with weights.
    pub fn insert_loaded(&self, model: Model) -> Result<Arc<Model>> {
        let name = model.name.clone();
        let mut models = self.models.write();
        if let Some(existing) = models.get(&name) {
            if existing.has_weights() {
                return Err(Error::load(None, "name", format!("model `{name}` is already loaded")));
            }
            if !existing.same_shape(&model) {
                return Err(Error::load(None, "layers", format!("weights for `{name}` do not match its declared layers")));
            }
        }
        let model = Arc::new(model);
        models.insert(name, Arc::clone(&model));
        Ok(model)
    }

    pub fn model(&self, name: &str) -> Result<Arc<Model>> {
        self.models
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("model `{name}`")))
    }

    pub fn model_names(&self) -> Vec<String> {
        self.models.read().keys().cloned().collect()
    }
}

fn check_name(name: &str) -> Result<()> {
    let ok = name.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !crate::sql::is_keyword(name);
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("`{name}` is not a valid identifier")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::write_weights;
    use std::fs;

    const META: &str = r#"{"name":"x","input_dim":3,"layers":[{"type":"dense","units":2,"activation":"softmax"}]}"#;

    #[test]
    fn create_then_load() {
        let cat = Catalog::new();
        let m = cat.create_model("fraud", META).unwrap();
        assert!(!m.has_weights());
        assert!(cat.create_model("fraud", META).is_err());

        let dir = tempfile::tempdir().unwrap();
        write_weights(&dir.path().join("w"), &[0.5; 6]).unwrap();
        write_weights(&dir.path().join("b"), &[0.0; 2]).unwrap();
        let path = dir.path().join("m.json");
        fs::write(
            &path,
            r#"{"name":"other","input_dim":3,"layers":[{"type":"dense","units":2,"activation":"softmax","weights":"w","bias":"b"}]}"#,
        )
        .unwrap();
        let loaded = cat.load_model("fraud", &path).unwrap();
        assert!(loaded.has_weights());
        assert_eq!(loaded.name, "fraud");
        assert!(matches!(cat.load_model("fraud", &path), Err(Error::Load { .. })));
    }

    #[test]
    fn mismatched_weights_leave_catalog_unchanged() {
        let cat = Catalog::new();
        cat.create_model("m", META).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_weights(&dir.path().join("w"), &[0.5; 8]).unwrap();
        write_weights(&dir.path().join("b"), &[0.0; 2]).unwrap();
        let path = dir.path().join("m.json");
        fs::write(
            &path,
            r#"{"name":"m","input_dim":4,"layers":[{"type":"dense","units":2,"weights":"w","bias":"b"}]}"#,
        )
        .unwrap();
        assert!(cat.load_model("m", &path).is_err());
        assert!(!cat.model("m").unwrap().has_weights());
    }

    #[test]
    fn truncated_weights_register_nothing() {
        let cat = Catalog::new();
        let dir = tempfile::tempdir().unwrap();
        write_weights(&dir.path().join("w"), &[0.5; 5]).unwrap();
        write_weights(&dir.path().join("b"), &[0.0; 2]).unwrap();
        let path = dir.path().join("m.json");
        fs::write(
            &path,
            r#"{"name":"m","input_dim":3,"layers":[{"type":"dense","units":2,"weights":"w","bias":"b"}]}"#,
        )
        .unwrap();
        match cat.load_model("m", &path) {
            Err(Error::Load { layer: Some(0), field, .. }) => assert_eq!(field, "weights"),
            other => panic!("{other:?}"),
        }
        assert!(cat.model("m").is_err());
    }
}
